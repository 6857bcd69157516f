import pytest

from crdflow.config import ConfigError, Schedule, builtin_config, load_config, loads, replace_section

MINIMAL = """
schema_version: 1
task: two_modes_1d
reward: {tag: mode_preference, target: [1.0], rival: [-1.0]}
"""


class TestSchedule:
    def test_large_group_schedules(self):
        old = Schedule("min(0.25+0.005i, 0.999)")
        samp = Schedule("min(max(0.0075(i-75), 0), 0.999)")
        assert old(0) == 0.25
        assert old(200) == 0.999
        assert samp(0) == 0.0 and samp(75) == 0.0
        assert samp(100) == pytest.approx(0.1875)
        assert samp(1000) == 0.999

    def test_constant(self):
        assert Schedule(0.9)(123) == 0.9

    @pytest.mark.parametrize("bad", ["__import__('os')", "i ** 2", "abs(i)", "min(i)", "x + 1", "'a'", "lambda: 1"])
    def test_rejects_unsafe(self, bad):
        with pytest.raises(ValueError):
            Schedule(bad)


class TestLoad:
    def test_minimal_uses_defaults(self):
        cfg = loads(MINIMAL)
        assert cfg.train.K == 8 and cfg.train.tau == "inf"
        assert loads(MINIMAL + "train: {tau: 0.5}\n").train.tau == 0.5
        assert cfg.train.eta_old(0) == 0.5

    def test_builtin_presets(self):
        desk = builtin_config("desk")
        assert desk.train.steps == 2000 and desk.train.beta_init == 0.05
        big = builtin_config("large_group")
        assert big.train.K == 24 and big.train.cfg_scale == 4.5

    def test_round_trip(self, tmp_path):
        cfg = builtin_config("desk")
        path = tmp_path / "c.yaml"
        path.write_text(cfg.to_yaml())
        assert load_config(path) == cfg

    def test_empty_file(self):
        with pytest.raises(ConfigError) as exc:
            loads("")
        assert len(exc.value.errors) == 3

    def test_all_errors_listed(self):
        text = MINIMAL + "train: {K: 1, beta_old: 0, bogus: 3}\n"
        with pytest.raises(ConfigError) as exc:
            loads(text)
        msg = "\n".join(exc.value.errors)
        assert "K" in msg and "beta_old" in msg and "bogus" in msg

    def test_yaml_error_position(self):
        with pytest.raises(ConfigError) as exc:
            loads("a: [1, 2\nb: 3\n", "x.yaml")
        assert exc.value.errors[0].startswith("x.yaml:")

    def test_schedule_out_of_range(self):
        with pytest.raises(ConfigError):
            loads(MINIMAL + "train: {eta_old: '0.5 + 0.01 i', steps: 100}\n")

    def test_two_sample_needs_pairs(self):
        with pytest.raises(ConfigError):
            loads(MINIMAL + "train: {loss: two_sample, K: 4}\n")
        assert loads(MINIMAL + "train: {loss: two_sample, K: 2}\n").train.K == 2

    def test_reward_per_prompt_count(self):
        text = """
schema_version: 1
task: {name: pair, dim: 1, prompts: [{means: [[-1.0], [1.0]], sigma: 0.3}, {means: [[0.0]], sigma: 0.5}]}
reward: [{tag: direction, direction: [1.0]}]
"""
        with pytest.raises(ConfigError):
            loads(text)

    def test_replace_section(self):
        cfg = loads(MINIMAL)
        new = replace_section(cfg, train__steps=3)
        assert new.train.steps == 3 and cfg.train.steps != 3
