import filecmp
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crdflow import trainer
from crdflow.config import Schedule, constant_schedule, loads, replace_section
from crdflow.flow import SamplerConfig, ode_sample
from crdflow.io import read_metrics, write_checkpoint
from crdflow.tensor_net import init_params

from _helpers import random_params

TINY = """
schema_version: 1
seed: 3
task: two_modes_1d
reward: {tag: mode_preference, target: [1.0], rival: [-1.0]}
model: {hidden: [16, 16]}
pretrain: {steps: 150, batch_size: 128}
train: {steps: 40, log_every: 10, checkpoint_every: 20, K: 4, groups_per_batch: 2}
eval: {n_samples: 128}
"""


@pytest.fixture
def tiny():
    return loads(TINY)


class TestEma:
    def test_extremes(self):
        rng = np.random.default_rng(0)
        a, b = random_params(rng), random_params(rng)
        assert trainer.ema_update(trainer.EmaState(a, constant_schedule(0.0), "old"), b, 0).params.same_values(b)
        assert trainer.ema_update(trainer.EmaState(a, constant_schedule(1.0), "old"), b, 0).params.same_values(a)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0.0, 1.0))
    def test_convexity(self, seed, eta):
        rng = np.random.default_rng(seed)
        a, b = random_params(rng), random_params(rng)
        out = trainer.ema_update(trainer.EmaState(a, constant_schedule(eta), "old"), b, 0).params.flat()
        lo, hi = np.minimum(a.flat(), b.flat()), np.maximum(a.flat(), b.flat())
        assert np.all((out >= lo) & (out <= hi))

    def test_schedule_values_and_range(self):
        s = trainer.EmaState(None, Schedule("min(0.25+0.005i, 0.999)"), "old")
        assert s.decay(0) == 0.25 and s.decay(200) == 0.999
        with pytest.raises(ValueError):
            trainer.EmaState(None, Schedule("0.5 + i"), "old").decay(1)

    def test_architecture_mismatch(self):
        a = random_params(np.random.default_rng(1))
        from crdflow.tensor_net import MlpSpec

        b = init_params(MlpSpec(2, 2, hidden=(3,), time_dim=4), np.random.default_rng(2))
        with pytest.raises(ValueError):
            trainer.ema_update(trainer.EmaState(a, constant_schedule(0.5), "old"), b, 0)


class TestPretrain:
    def test_zero_steps_is_init(self, tiny):
        phi = trainer.pretrain(tiny, steps=0)
        _, _, init_rng = trainer._streams(tiny.seed)
        assert phi.same_values(init_params(trainer.model_spec(tiny), init_rng))

    def test_loss_decreases(self, tiny):
        hist = []
        trainer.pretrain(replace_section(tiny, pretrain__steps=500), history=hist)
        assert np.mean(hist[-50:]) < hist[0]

    def test_single_gaussian_mean(self):
        cfg = loads("""
schema_version: 1
task: {name: one, dim: 1, prompts: [{means: [[0.5]], sigma: 0.3}]}
reward: {tag: direction, direction: [1.0]}
model: {hidden: [32, 32]}
pretrain: {steps: 2000, batch_size: 256, lr: 2.0e-3}
""")
        phi = trainer.pretrain(cfg)
        x = ode_sample(phi, 0, 4000, SamplerConfig(20), rng=np.random.default_rng(0))
        assert abs(x.mean() - 0.5) < 0.1


class TestStep:
    def test_zero_lr_keeps_all_copies_equal(self, tiny):
        cfg = replace_section(tiny, optimizer__lr=0.0, optimizer__weight_decay=0.0)
        phi = trainer.pretrain(cfg, steps=20)
        state = trainer.init_state(cfg, phi)
        for i in range(3):
            res = trainer.train_step(state, cfg, i)
        assert state.theta.same_values(phi)
        assert state.old.params.same_values(phi) and state.samp.params.same_values(phi)
        assert state.step == 3 and np.isfinite(res.loss)

    def test_sampling_reads_samp_not_old(self, tiny):
        phi = trainer.pretrain(tiny, steps=20)
        a, b = trainer.init_state(tiny, phi), trainer.init_state(tiny, phi)
        b.old = trainer.EmaState(random_params(np.random.default_rng(9), phi.spec), a.old.schedule, "old")
        ga, gb = trainer.sample_groups(a, tiny), trainer.sample_groups(b, tiny)
        assert all(np.array_equal(x.samples, y.samples) for x, y in zip(ga, gb))
        c = trainer.init_state(tiny, phi)
        c.samp = trainer.EmaState(random_params(np.random.default_rng(9), phi.spec), a.samp.schedule, "samp")
        gc = trainer.sample_groups(c, tiny)
        assert not all(np.array_equal(x.samples, y.samples) for x, y in zip(ga, gc))

    def test_beta_hat_logged(self, tiny):
        phi = trainer.pretrain(tiny, steps=20)
        state = trainer.init_state(tiny, phi)
        res = trainer.train_step(state, tiny, 0)
        raw = np.concatenate([g.r_raw for g in res.groups])
        assert np.array_equal(res.beta_hat, raw * tiny.train.beta_init)


class TestRun:
    def test_zero_budget_keeps_phi(self, tiny, tmp_path):
        res = trainer.run(replace_section(tiny, train__steps=0), tmp_path / "r")
        assert res.theta.same_values(res.state.phi)
        assert res.summary["final_eval_reward"] == res.summary["baseline_reward"]

    def test_layout_and_resume(self, tiny, tmp_path):
        full = trainer.run(tiny, tmp_path / "a")
        d = tmp_path / "a"
        for name in ("config.yaml", "metrics.csv", "timing.csv", "summary.json"):
            assert (d / name).exists()
        assert read_metrics(d / "metrics.csv")["step"].tolist() == [10, 20, 30, 40]
        # resume the same directory from the step-20 checkpoint
        (d / "checkpoints" / "step_000040").rename(tmp_path / "old_final")
        again = trainer.run(tiny, d, resume=d / "checkpoints" / "step_000020")
        assert again.summary == full.summary
        assert read_metrics(d / "metrics.csv")["step"].tolist() == [10, 20, 30, 40]
        cmp = filecmp.dircmp(tmp_path / "old_final", d / "checkpoints" / "step_000040")
        assert not cmp.diff_files and not cmp.left_only and not cmp.right_only

    def test_numeric_abort_dumps(self, tiny, tmp_path):
        phi = random_params(np.random.default_rng(0), trainer.model_spec(tiny))
        phi.tensors["b2"][:] = np.nan
        with pytest.raises(trainer.NumericAbort):
            trainer.run(tiny, tmp_path / "r", phi=phi)
        dumps = list((tmp_path / "r").glob("abort_step_*.json"))
        assert len(dumps) == 1
        json.loads(dumps[0].read_text())

    def test_load_phi(self, tiny, tmp_path):
        phi = trainer.pretrain(tiny, steps=5)
        write_checkpoint(tmp_path / "p", {"phi": phi})
        assert trainer.load_phi(tmp_path / "p").same_values(phi)
