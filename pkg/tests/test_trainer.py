import numpy as np
import pytest

from nvsdepth import trainer as tr
from nvsdepth.data.dataset import generate_dataset
from nvsdepth.data.synthetic import SceneConfig, SceneSample, generate_sample, with_motion
from nvsdepth.errors import ConfigurationError, DegenerateInputError, NumericalError
from nvsdepth.losses import LossWeights, image_loss, read_loss_log
from nvsdepth.metrics import METRIC_NAMES, NYU_RANGE
from nvsdepth.nets import depnet_forward, synnet_forward
from nvsdepth.tensor import Tape, Tensor, backward
from nvsdepth.tensor.checkpoint import load_checkpoint
from nvsdepth.trainer import (
    MODES,
    TrainConfig,
    build_networks,
    evaluate,
    forward_pipeline,
    make_batch,
    read_config_file,
    run_ablation,
    train,
    write_oracle_checkpoint,
)

SCENE = SceneConfig(width=16, height=16, num_primitives=1)


def tiny_cfg(**kw):
    base = dict(levels=2, base_channels=4, synnet_levels=2, synnet_base_channels=4, epochs=1, batch_size=2)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def tiny_splits():
    return generate_dataset(SCENE, 10, 11)


def pipeline(cfg, samples, dtype=np.float64, **kw):
    depnet, synnet = build_networks(cfg, dtype)
    out = forward_pipeline(make_batch(samples, dtype), depnet, synnet, cfg.mode, cfg.weights, **kw)
    return depnet, synnet, out


class TestConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.learning_rate, cfg.batch_size, cfg.alpha, cfg.beta) == (1e-4, 8, 1.0, 0.5)

    def test_depnet_only_forces_zero_beta(self):
        assert TrainConfig(mode="depnet_only").weights == LossWeights(1.0, 0.0)
        assert TrainConfig(mode="full").weights == LossWeights(1.0, 0.5)

    def test_invalid(self):
        with pytest.raises(ConfigurationError):
            TrainConfig(mode="synnet_only")
        with pytest.raises(ConfigurationError):
            TrainConfig(eval_range="mars")
        with pytest.raises(ConfigurationError):
            TrainConfig.from_dict({"learning_rat": "1"})
        with pytest.raises(ConfigurationError):
            TrainConfig.from_dict({"epochs": "many"})

    def test_config_file(self, tmp_path):
        path = tmp_path / "train.cfg"
        path.write_text("# desk run\nmode = depnet_synnet\nepochs=3  # short\n\nlearning_rate=1e-3\n"
                        "detach_warp_for_l2=true\n")
        cfg = TrainConfig.from_dict(read_config_file(path))
        assert (cfg.mode, cfg.epochs, cfg.learning_rate, cfg.detach_warp_for_l2) == ("depnet_synnet", 3, 1e-3, True)
        path.write_text("epochs 3\n")
        with pytest.raises(ConfigurationError):
            read_config_file(path)


class TestPipeline:
    def test_depnet_only_report(self, tiny_splits):
        _, synnet, out = pipeline(tiny_cfg(mode="depnet_only"), tiny_splits.train[:2])
        r = out.report
        assert r.l2 is None and r.l3 is None
        assert r.total == pytest.approx(r.l1, abs=1e-12)
        assert out.synth_rgb2 is None and synnet.forward_count == 0

    def test_depnet_synnet_skips_l3(self, tiny_splits):
        _, _, out = pipeline(tiny_cfg(mode="depnet_synnet"), tiny_splits.train[:2])
        assert out.report.l2 is not None and out.report.l3 is None and out.pred_depth2 is None

    @pytest.mark.parametrize("mode", MODES)
    def test_total_matches_components(self, tiny_splits, mode):
        cfg = tiny_cfg(mode=mode, alpha=1.3, beta=0.7)
        _, _, out = pipeline(cfg, tiny_splits.train[:3], np.float32)
        assert abs(out.report.recompute_total(cfg.weights) - out.report.total) < 1e-6

    def test_identity_pose_reduction(self):
        s = generate_sample(with_motion(SCENE, 0.0, 0.0), 2)
        gt = Tensor(s.depth1.values[None, None].astype(np.float64))
        cfg = tiny_cfg(mode="depnet_synnet")
        _, synnet, out = pipeline(cfg, [s], depth_override=gt)
        hit = out.warp_results[0].hit_mask
        warped = out.warped.data[0].transpose(1, 2, 0)
        np.testing.assert_allclose(warped[hit], s.rgb1[hit], atol=1e-9)
        rgb1 = np.where(hit[..., None], s.rgb1, 0.0).transpose(2, 0, 1)[None]
        expected = image_loss(synnet_forward(synnet, rgb1), s.rgb1).item()
        assert out.report.l2 == pytest.approx(expected, rel=1e-12)

    def test_weight_sharing(self, tiny_splits):
        depnet, _, out = pipeline(tiny_cfg(), tiny_splits.train[:2])
        again = depnet_forward(depnet, out.synth_rgb2.data)
        assert np.array_equal(again.data, out.pred_depth2.data)

    def test_gradient_reaches_every_parameter(self, tiny_splits):
        cfg = tiny_cfg()
        depnet, synnet = build_networks(cfg, np.float64)
        with Tape() as tape:
            out = forward_pipeline(make_batch(tiny_splits.train[:2], np.float64), depnet, synnet)
        backward(tape, out.loss)
        for net in (depnet, synnet):
            for name, p in net.params.items():
                assert p.grad is not None and np.any(p.grad != 0), name

    def test_detached_l2_leaves_depnet_untouched(self, tiny_splits):
        cfg = tiny_cfg(mode="depnet_synnet")
        batch = make_batch(tiny_splits.train[:2], np.float64)

        def depnet_grad(detach):
            depnet, synnet = build_networks(cfg, np.float64)
            with Tape() as tape:
                out = forward_pipeline(batch, depnet, synnet, cfg.mode, LossWeights(0.0, 1.0),
                                       detach_warp_for_l2=detach)
            backward(tape, out.loss)
            return depnet.params["enc0.conv0.weight"].grad

        g = depnet_grad(True)
        assert g is None or not np.any(g)
        assert np.any(depnet_grad(False))

    def test_warped_depth_channel(self, tiny_splits):
        cfg = tiny_cfg(warped_depth_input=True)
        assert cfg.synnet_config().in_channels == 4
        _, _, out = pipeline(cfg, tiny_splits.train[:2], warped_depth_input=True)
        assert np.isfinite(out.report.total)


class TestTrain:
    def test_zero_learning_rate(self, tiny_splits):
        cfg = tiny_cfg(learning_rate=0.0, epochs=2)
        before = [p.data.copy() for p in tr.joint_parameters(*build_networks(cfg)).values()]
        res = train(cfg, tiny_splits)
        after = list(tr.joint_parameters(res.depnet, res.synnet).values())
        assert len(res.record.steps) == 8
        for a, b in zip(before, after):
            assert np.array_equal(a, b.data)

    def test_deterministic_checkpoints(self, tiny_splits, tmp_path):
        cfg = tiny_cfg(epochs=1)
        a = train(cfg, tiny_splits, tmp_path / "a", max_steps=3)
        b = train(cfg, tiny_splits, tmp_path / "b", max_steps=3)
        assert a.checkpoint.read_bytes() == b.checkpoint.read_bytes()

    def test_logs(self, tiny_splits, tmp_path):
        res = train(tiny_cfg(epochs=2), tiny_splits, tmp_path)
        rows = read_loss_log(tmp_path / "loss_log.csv")
        assert [r["step"] for r in rows] == list(range(1, 9))
        assert all(r["l1"] is not None and r["l2"] is not None and r["l3"] is not None for r in rows)
        for r in rows:
            assert abs(r["l1"] + 0.5 * r["l2"] + r["l3"] - r["total"]) < 1e-6
        val = (tmp_path / "val_log.csv").read_text().splitlines()
        assert val[0] == "epoch,rel,rmse,rmse_log,sq_rel,d1,d2,d3" and len(val) == 3
        assert len(res.record.epochs) == 2 and res.record.wall_time > 0

    def test_checkpoint_reload(self, tiny_splits, tmp_path):
        res = train(tiny_cfg(), tiny_splits, tmp_path, max_steps=2)
        header, depnet, synnet, adam = tr.load_networks(res.checkpoint)
        assert header["train.mode"] == "full" and header["step"] == "2"
        assert adam.step == 2
        for k, p in res.depnet.params.items():
            assert np.array_equal(depnet.params[k].data, p.data)
        assert set(synnet.params) == set(res.synnet.params)

    def test_last_partial_batch_kept(self, tiny_splits):
        res = train(tiny_cfg(batch_size=3), tiny_splits)
        assert len(res.record.steps) == 3  # 8 training samples -> 3 + 3 + 2

    def test_symmetric_pairs(self, tiny_splits):
        res = train(tiny_cfg(symmetric_pairs=True, batch_size=4), tiny_splits)
        assert len(res.record.steps) == 4

    def test_nan_aborts(self, tiny_splits):
        s = tiny_splits.train[0]
        bad = SceneSample(np.full_like(s.rgb1, np.nan), s.rgb2, s.depth1, s.depth2, s.pose1, s.pose2,
                          s.intrinsics, "nan")
        with pytest.raises(NumericalError, match="non-finite"):
            train(tiny_cfg(mode="depnet_only"), [bad])

    def test_empty_train_split(self):
        with pytest.raises(DegenerateInputError):
            train(tiny_cfg(), [])


class TestEvaluate:
    def test_gt_oracle(self, tiny_splits, tmp_path):
        path = write_oracle_checkpoint(tmp_path / "oracle.nvsd")
        m = evaluate(path, tiny_splits.test + tiny_splits.val, NYU_RANGE)
        assert (m.rel, m.rmse, m.rmse_log, m.sq_rel) == (0, 0, 0, 0)
        assert (m.delta1, m.delta2, m.delta3) == (1, 1, 1)

    def test_only_depnet_runs(self, tiny_splits, tmp_path, monkeypatch):
        res = train(tiny_cfg(), tiny_splits, tmp_path, max_steps=1)
        calls = []
        monkeypatch.setattr(tr, "synnet_forward", lambda *a, **k: calls.append(1))
        before = {k: p.data.copy() for k, p in res.depnet.params.items()}
        syn_count = res.synnet.forward_count
        a = evaluate(res.depnet, tiny_splits.test, NYU_RANGE)
        b = evaluate(res.checkpoint, tiny_splits.test, NYU_RANGE)
        assert res.synnet.forward_count == syn_count and not calls
        assert a == b
        for k, p in res.depnet.params.items():
            assert np.array_equal(before[k], p.data)

    def test_empty_split(self, tiny_splits):
        depnet, _ = build_networks(tiny_cfg())
        with pytest.raises(DegenerateInputError):
            evaluate(depnet, [], NYU_RANGE)


def test_ablation_shape_and_orders(tiny_splits, tmp_path):
    res = run_ablation(tiny_cfg(validate_every_epoch=False), tiny_splits, tmp_path)
    table = res.table()
    assert [row[0] for row in table] == list(MODES)
    assert all(len(row) == 1 + len(METRIC_NAMES) == 8 for row in table)
    assert res.orders["depnet_only"] == res.orders["depnet_synnet"] == res.orders["full"]
    lines = (tmp_path / "ablation.csv").read_text().splitlines()
    assert lines[0] == "mode,rel,rmse,rmse_log,sq_rel,d1,d2,d3" and len(lines) == 4
    # first-step L1 is identical across modes: same init, same first batch
    first = [res.records[m].steps[0][1].l1 for m in MODES]
    assert first[0] == first[1] == first[2]
