import dataclasses
import hashlib

import numpy as np
import pytest

from biasguide import ensemble, trainer
from biasguide.data import TrainView
from biasguide.errors import ContractError, TrainingError


@pytest.fixture
def setup(tiny_cfg, tiny_dataset):
    view = tiny_dataset.train.view()
    ids = view.ids
    parts = ensemble.PartitionSet(set(ids[np.arange(len(ids)) % 3 != 0].tolist()),
                                  set(ids[np.arange(len(ids)) % 5 == 0].tolist()))
    return tiny_cfg, view, parts


def run(cfg, view, parts, **changes):
    e = dataclasses.replace(cfg.experiment, **changes)
    return trainer.Trainer(e, view, None if e.mode == "vanilla" else parts, cfg.arch()).run()


def recomposed(r, cfg):
    total = r["lambda_main"] * r["main"]
    if cfg.guide_loss:
        total += r["guide"]
    if cfg.bn_loss:
        total += r["bn"]
    return total


class TestObjective:
    def test_total_recomposes_every_logged_step(self, setup):
        cfg, view, parts = setup
        res = run(cfg, view, parts)
        assert len(res.step_log) == cfg.experiment.total_iters
        for r in res.step_log:
            assert abs(r["total"] - recomposed(r, cfg.experiment)) <= 1e-9
            assert abs(r["guide"] - (0.1 * r["guide_sim"] + r["guide_cls"])) <= 1e-9
            assert 0 <= r["w_mean"] <= 1 and 0 <= r["s_w_mean"] <= 1

    def test_lambda_endpoints(self, setup):
        cfg, view, parts = setup
        log = run(cfg, view, parts).step_log
        guided = [r for r in log if r["guided"]]
        assert guided[0]["step"] == cfg.experiment.t2 and guided[0]["lambda_main"] == 0.0
        assert guided[-1]["step"] == cfg.experiment.total_iters and guided[-1]["lambda_main"] == 1.0

    @pytest.mark.parametrize("flag", ["guide_loss", "bn_loss"])
    def test_ablation_switches(self, setup, flag):
        cfg, view, parts = setup
        log = run(cfg, view, parts, **{flag: False}).step_log
        key = "guide" if flag == "guide_loss" else "bn"
        e = dataclasses.replace(cfg.experiment, **{flag: False})
        for r in log:
            assert r[key] == 0.0
            assert abs(r["total"] - recomposed(r, e)) <= 1e-9

    def test_vanilla_uses_plain_ce(self, setup):
        cfg, view, parts = setup
        res = run(cfg, view, parts, mode="vanilla")
        assert res.f_b is None and res.tracker is None
        assert all(r["w_mean"] == 1.0 and r["guided"] == 0 for r in res.step_log)

    def test_reweight_only_never_guides(self, setup):
        cfg, view, parts = setup
        assert not any(r["guided"] for r in run(cfg, view, parts, mode="reweight_only").step_log)

    def test_pair_tiers_follow_source(self, setup):
        cfg, view, parts = setup
        log = run(cfg, view, parts, pair_source="d").step_log
        guided = [r for r in log if r["guided"]]
        assert all(r["tier2"] == cfg.experiment.batch_size for r in guided)


class TestSchedule:
    def test_deterministic(self, setup):
        cfg, view, parts = setup
        a, b = run(cfg, view, parts), run(cfg, view, parts)
        np.testing.assert_array_equal(a.f_d.flat, b.f_d.flat)
        np.testing.assert_array_equal(a.tracker.s, b.tracker.s)
        assert a.step_log == b.step_log

    def test_t2_at_total_equals_reweight_only(self, setup):
        cfg, view, parts = setup
        t = cfg.experiment.total_iters
        a = run(cfg, view, parts, t2=t)
        b = run(cfg, view, parts, mode="reweight_only", t2=t)
        np.testing.assert_array_equal(a.f_d.flat, b.f_d.flat)
        assert a.step_log == b.step_log

    def test_prefix_ignores_guidance_module(self, setup):
        cfg, view, parts = setup

        class Exploding:
            @staticmethod
            def compute(*_):
                raise AssertionError("guidance called before t2")

        def trajectory(guidance):
            tr = trainer.Trainer(cfg.experiment, view, parts, cfg.arch(), guidance=guidance)
            h = hashlib.sha256()
            for _ in range(cfg.experiment.t2 - 1):
                tr.run(tr.step + 1)
                h.update(tr.f_d.flat.tobytes())
            return h.hexdigest()

        assert trajectory(trainer.guidance_mod) == trajectory(Exploding)

    def test_fork_matches_independent_run(self, setup):
        cfg, view, parts = setup
        base = trainer.Trainer(dataclasses.replace(cfg.experiment, mode="reweight_only"), view, parts, cfg.arch())
        base.run(cfg.experiment.t2 - 1)
        for changes in ({"mode": "full"}, {"mode": "full", "pair_source": "d"}, {"mode": "reweight_only"}):
            branch = base.fork(**changes).run()
            alone = run(cfg, view, parts, **changes)
            np.testing.assert_array_equal(branch.f_d.flat, alone.f_d.flat)
            np.testing.assert_array_equal(branch.f_b.flat, alone.f_b.flat)
            assert branch.step_log == alone.step_log
        assert base.step == cfg.experiment.t2 - 1

    def test_fork_rules(self, setup):
        cfg, view, parts = setup
        tr = trainer.Trainer(cfg.experiment, view, parts, cfg.arch())
        with pytest.raises(ContractError):
            tr.fork(mode="vanilla")
        tr.run(cfg.experiment.t2)
        with pytest.raises(ContractError, match="guided phase"):
            tr.fork(pair_source="d")


class TestBiasedModel:
    def test_biased_model_ignores_the_debiased_objective(self, setup):
        cfg, view, parts = setup
        a = run(cfg, view, parts)
        b = run(cfg, view, parts, mode="reweight_only")
        np.testing.assert_array_equal(a.f_b.flat, b.f_b.flat)
        np.testing.assert_array_equal(a.tracker.l, b.tracker.l)

    def test_empty_amplified_set_freezes_f_b(self, setup):
        cfg, view, parts = setup
        empty = ensemble.PartitionSet(set(), parts.d_bn_cand)
        tr = trainer.Trainer(cfg.experiment, view, empty, cfg.arch())
        start = tr.f_b.flat.copy()
        tr.run(5)
        np.testing.assert_array_equal(tr.f_b.flat, start)

    def test_biased_step_uses_only_amplified_members(self, setup):
        cfg, view, parts = setup
        tr = trainer.Trainer(cfg.experiment, view, parts, cfg.arch())
        x, y, pos = view.images[:8], view.labels[:8], np.arange(8)
        tr.in_amplified[:] = False
        tr.in_amplified[[1, 4]] = True
        other = trainer.Trainer(cfg.experiment, view, parts, cfg.arch())
        other.in_amplified[:] = False
        other.in_amplified[[1, 4]] = True
        # changing the images of non-amplified members must not change the update
        x2 = x.copy()
        x2[[0, 2, 3, 5, 6, 7]] = 0.5
        tr._step_biased(x, y, pos)
        other._step_biased(x2, y, pos)
        np.testing.assert_array_equal(tr.f_b.flat, other.f_b.flat)


class TestContracts:
    def test_needs_train_view(self, tiny_cfg, tiny_dataset):
        with pytest.raises(ContractError, match="TrainView"):
            trainer.Trainer(tiny_cfg.experiment, tiny_dataset.train, None)

    def test_reweighted_modes_need_partitions(self, setup):
        cfg, view, _ = setup
        with pytest.raises(ContractError, match="partitions"):
            trainer.Trainer(cfg.experiment, view, None, cfg.arch())

    def test_non_finite_loss_aborts_with_dossier(self, setup):
        cfg, view, parts = setup
        images = view.images.copy()
        images[:] = np.nan
        bad = TrainView(view.ids, images, view.labels)
        with pytest.raises(TrainingError) as info:
            trainer.Trainer(dataclasses.replace(cfg.experiment, mode="vanilla"), bad, None, cfg.arch()).run()
        assert info.value.dossier["step"] == 1 and "lambda_main" in info.value.dossier

    def test_hooks_fire_on_schedule(self, setup):
        cfg, view, parts = setup
        evals, ckpts = [], []
        tr = trainer.Trainer(cfg.experiment, view, parts, cfg.arch(), eval_fn=lambda t, net: evals.append(t) or t,
                             checkpoint_fn=lambda t, _: ckpts.append(t))
        res = tr.run()
        assert evals == [20, 40, 60] and ckpts == [30, 60]
        assert [t for t, _ in res.eval_log] == evals
        assert [t for t, _, _ in res.tracker_log] == [10, 20, 30, 40, 50, 60]
