import json
import math

import numpy as np
import pytest
import torch
from torch import nn

from flowgate.data import SegmentPair
from flowgate.errors import ShapeMismatch
from flowgate.model import FgnModel, build_fgn
from flowgate.train import (
    CollapseDetected,
    CorruptManifest,
    EmptyDataset,
    MissingGroup,
    NonFiniteLoss,
    OutOfRange,
    TensorCountMismatch,
    TrainConfig,
    TransferPolicy,
    UnsupportedVersion,
    build_sgd,
    cosine_lr,
    load_checkpoint,
    pretrain_vicreg,
    save_checkpoint,
    train_supervised,
    transfer_weights,
    weight_decay_param_names,
)
from flowgate.vicreg import ExpanderConfig, VicregWeights, build_ssl_model

from conftest import TINY_CFG

N, S = TINY_CFG.n_frames, TINY_CFG.frame_size


def toy_dataset(n_per_class=8, seed=0, size=S, frames=N):
    """Blatantly separable in-memory segment pairs.

    Class 1 carries a strong spatial grid in both streams, class 0 is
    white noise; the tiny model picks this up within a few epochs.
    """
    rng = np.random.default_rng(seed)
    grid = ((np.indices((size, size)).sum(axis=0) // 4) % 2).astype(np.float32)
    pairs = []
    for label in (0, 1):
        for _ in range(n_per_class):
            rgb = rng.normal(0.5, 0.1, (3, frames, size, size)).astype(np.float32)
            flow = rng.normal(0.0, 0.3, (2, frames, size, size)).astype(np.float32)
            if label == 1:
                rgb += 0.8 * grid
                flow += 2.5 * grid
            pairs.append(
                SegmentPair(
                    rgb=rgb.astype(np.float32),
                    flow=flow.astype(np.float32),
                    label=label,
                    source_id=f"toy{label}",
                )
            )
    order = rng.permutation(len(pairs))
    return [pairs[i] for i in order]


def fast_cfg(**kw):
    defaults = dict(batch_size=8, epochs=2, patience=2, seed=0, t_max=30)
    defaults.update(kw)
    return TrainConfig(**defaults)


class TestCosineLr:
    def test_endpoints_exact(self):
        cfg = TrainConfig()
        assert cosine_lr(0, cfg) == 0.01
        assert cosine_lr(30, cfg) == 0.001

    def test_midpoint_is_arithmetic_mean(self):
        # float addition of 0.005 + 0.0005 lands within one ulp of the
        # decimal literal; compare at ulp resolution
        cfg = TrainConfig()
        assert abs(cosine_lr(15, cfg) - 0.0055) <= math.ulp(0.0055)

    def test_monotone_decreasing(self):
        cfg = TrainConfig()
        values = [cosine_lr(t, cfg) for t in range(31)]
        assert all(b < a for a, b in zip(values, values[1:]))

    def test_out_of_range(self):
        cfg = TrainConfig()
        with pytest.raises(OutOfRange):
            cosine_lr(31, cfg)
        with pytest.raises(OutOfRange):
            cosine_lr(-1, cfg)


class TestSgdRecipe:
    def test_update_matches_closed_form_trajectory(self):
        lr, momentum, wd, a = 0.1, 0.9, 0.01, 0.5
        param = nn.Parameter(torch.tensor([1.0], dtype=torch.float64))
        opt = torch.optim.SGD([param], lr=lr, momentum=momentum, weight_decay=wd)
        seen = []
        for _ in range(5):
            opt.zero_grad()
            loss = a * param**2
            loss.backward()
            opt.step()
            seen.append(float(param.detach()))
        # independent recurrence: g = 2a*theta + wd*theta; buf = m*buf + g
        theta, buf = 1.0, 0.0
        expected = []
        for step in range(5):
            g = 2 * a * theta + wd * theta
            buf = momentum * buf + g if step else g
            theta = theta - lr * buf
            expected.append(theta)
        assert np.allclose(seen, expected, rtol=0, atol=1e-12)

    def test_weight_decay_excludes_norms_and_biases(self):
        model = build_fgn(TINY_CFG, seed=0)
        decay = set(weight_decay_param_names(model))
        all_names = {name for name, _ in model.named_parameters()}
        assert decay <= all_names
        for name in all_names:
            if name.endswith("bias") or ".norm." in name:
                assert name not in decay
            if name.endswith("weight") and ".norm." not in name:
                assert name in decay

    def test_optimizer_groups_carry_the_split(self):
        model = build_fgn(TINY_CFG, seed=0)
        cfg = fast_cfg()
        opt = build_sgd(model, cfg)
        assert opt.param_groups[0]["weight_decay"] == cfg.weight_decay
        assert opt.param_groups[1]["weight_decay"] == 0.0
        n_decay = len(opt.param_groups[0]["params"])
        assert n_decay == len(weight_decay_param_names(model))


class _ConstantLogit(FgnModel):
    """Forward ignores the inputs; the trainer sees a perfectly flat loss."""

    def __init__(self, cfg):
        super().__init__(cfg)
        self.offset = nn.Parameter(torch.tensor(0.25))

    def forward(self, rgb, flow, **kw):
        return (self.offset * 0.0 + 0.3).expand(rgb.shape[0], 1)


class TestTrainSupervised:
    def test_learns_separable_toy_data(self):
        # small batches give the optimizer enough steps within few epochs
        model = build_fgn(TINY_CFG, seed=0)
        train = toy_dataset(n_per_class=8, seed=0)
        val = toy_dataset(n_per_class=4, seed=1)
        cfg = fast_cfg(batch_size=2, lr=0.05, epochs=6, patience=6)
        model, history = train_supervised(model, train, val, cfg)
        best = max(r["val_metrics"]["accuracy"] for r in history.records)
        assert best >= 0.75
        assert history.stop_reason in ("completed", "early_stop")

    def test_history_record_structure(self):
        model = build_fgn(TINY_CFG, seed=0)
        data = toy_dataset(4, seed=2)
        _, history = train_supervised(model, data, data, fast_cfg(epochs=1, patience=1))
        rec = history.records[0]
        assert set(rec) == {"epoch", "train_loss", "val_loss", "val_metrics", "lr", "wall_time"}
        assert rec["lr"] == 0.01
        canon = history.to_json_lines()
        assert "wall_time" not in canon
        for line in canon.strip().splitlines():
            json.loads(line)

    def test_flat_loss_triggers_early_stop(self):
        model = _ConstantLogit(TINY_CFG)
        data = toy_dataset(4, seed=3)
        _, history = train_supervised(
            model, data, data, fast_cfg(epochs=10, patience=2)
        )
        assert history.stop_reason == "early_stop"
        assert len(history.records) == 3  # best at epoch 0, two flat epochs
        assert history.best_epoch == 0

    def test_returns_best_validation_model(self):
        from flowgate.train import evaluate_supervised

        model = build_fgn(TINY_CFG, seed=1)
        train = toy_dataset(6, seed=4)
        val = toy_dataset(3, seed=5)
        cfg = fast_cfg(epochs=4, patience=4)
        model, history = train_supervised(model, train, val, cfg)
        best_recorded = min(r["val_loss"] for r in history.records)
        re_evaluated, _, _, _ = evaluate_supervised(model, val, cfg)
        assert re_evaluated == pytest.approx(best_recorded, abs=1e-9)
        assert history.records[history.best_epoch]["val_loss"] == best_recorded

    def test_bit_reproducible_across_runs(self):
        outs = []
        for _ in range(2):
            model = build_fgn(TINY_CFG, seed=7)
            train = toy_dataset(6, seed=8)
            val = toy_dataset(3, seed=9)
            _, history = train_supervised(model, train, val, fast_cfg(epochs=2))
            outs.append(history.to_json_lines())
        assert outs[0] == outs[1]

    def test_worker_count_does_not_change_history(self):
        outs = []
        for workers in (0, 2):
            model = build_fgn(TINY_CFG, seed=7)
            train = toy_dataset(6, seed=8)
            val = toy_dataset(3, seed=9)
            _, history = train_supervised(
                model, train, val, fast_cfg(epochs=1, patience=1, workers=workers)
            )
            outs.append(history.to_json_lines())
        assert outs[0] == outs[1]

    def test_empty_dataset_rejected(self):
        model = build_fgn(TINY_CFG, seed=0)
        with pytest.raises(EmptyDataset):
            train_supervised(model, [], [], fast_cfg())

    def test_non_finite_loss_aborts_with_diagnostics(self):
        model = build_fgn(TINY_CFG, seed=0)
        data = toy_dataset(4, seed=10)
        data[0].rgb[0, 0, 0, 0] = np.nan
        with pytest.raises(NonFiniteLoss) as info:
            train_supervised(model, data, data, fast_cfg(epochs=1, patience=1))
        assert "epoch" in info.value.diagnostics

    def test_mixed_precision_opt_in_runs(self):
        model = build_fgn(TINY_CFG, seed=0)
        data = toy_dataset(4, seed=11)
        _, history = train_supervised(
            model, data, data, fast_cfg(epochs=1, patience=1, precision="mixed")
        )
        assert len(history.records) == 1

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(patience=31, epochs=30)
        with pytest.raises(ValueError):
            TrainConfig(lr=0.001, eta_min=0.01)
        with pytest.raises(ValueError):
            TrainConfig(loss="hinge")

    def test_multiclass_head_trains_with_cross_entropy(self):
        from dataclasses import replace

        rng = np.random.default_rng(20)
        pairs = []
        for label in range(6):
            for _ in range(2):
                rgb = rng.normal(0.5, 0.1, (3, N, S, S)).astype(np.float32)
                rgb[label % 3] += 0.5
                flow = rng.normal(0, 0.3, (2, N, S, S)).astype(np.float32)
                pairs.append(SegmentPair(rgb=rgb, flow=flow, label=label))
        model = build_fgn(replace(TINY_CFG, num_classes=6), seed=0)
        cfg = fast_cfg(epochs=1, patience=1, loss="cross_entropy")
        _, history = train_supervised(model, pairs, pairs, cfg)
        rec = history.records[0]["val_metrics"]
        assert 0.0 <= rec["accuracy"] <= 1.0
        assert 0.0 <= rec["top5"] <= 1.0
        assert rec["top5"] >= rec["accuracy"]


def tiny_ssl(seed=0, dropout=True):
    cfg = TINY_CFG
    if not dropout:
        from dataclasses import replace

        cfg = replace(TINY_CFG, spatial_dropout_p=0.0)
    fgn = build_fgn(cfg, seed=seed)
    width = fgn.feature_width()
    return build_ssl_model(fgn, ExpanderConfig(input_dim=width, hidden_dims=(48, 48, 32)))


class TestPretrainVicreg:
    def test_runs_and_logs_breakdown(self):
        model = tiny_ssl()
        data = toy_dataset(8, seed=12)
        model, history = pretrain_vicreg(
            model,
            data,
            fast_cfg(batch_size=4, epochs=2, patience=2),
            max_iterations=8,
            log_interval=2,
        )
        assert history.stop_reason == "iteration_cap"
        assert history.records
        rec = history.records[0]
        assert set(rec["loss"]) == {"invariance", "variance", "covariance", "total"}
        assert {"std_min", "std_mean", "std_max", "mean_offdiag_abs_cov", "rank"} <= set(
            rec["diagnostics"]
        )
        assert not history.collapse_detected

    def test_collapse_warning_on_degenerate_batches(self):
        from flowgate.augment import AugmentConfig

        model = tiny_ssl(seed=1, dropout=False)
        base = toy_dataset(1, seed=13)[0]
        data = [base] * 16  # identical segments
        # deterministic views: every row embeds identically, so the
        # per-dimension spread is exactly zero from the first batch
        frozen = AugmentConfig(
            mode="ssl",
            jitter_prob=0.0,
            flip_prob=0.0,
            zoom_scale=(1.0, 1.0),
            zoom_aspect=(1.0, 1.0),
        )
        weights = VicregWeights(mu=0.0)
        with pytest.warns(CollapseDetected):
            _, history = pretrain_vicreg(
                model,
                data,
                fast_cfg(batch_size=4, epochs=1, patience=1),
                weights=weights,
                augment_cfg=frozen,
                max_iterations=4,
                log_interval=1,
            )
        assert history.collapse_detected

    def test_reproducible(self):
        outs = []
        for _ in range(2):
            model = tiny_ssl(seed=2)
            data = toy_dataset(6, seed=14)
            _, history = pretrain_vicreg(
                model,
                data,
                fast_cfg(batch_size=4, epochs=1, patience=1),
                max_iterations=3,
                log_interval=1,
            )
            outs.append(history.to_json_lines())
        assert outs[0] == outs[1]


class TestCheckpoints:
    def test_round_trip_preserves_logits(self, tmp_path):
        from conftest import tiny_inputs

        model = build_fgn(TINY_CFG, seed=3)
        model.eval()
        rgb, flow = tiny_inputs(batch=2, seed=5)
        before = model(rgb, flow)
        save_checkpoint(model, tmp_path / "ckpt", metadata={"note": "test"})
        restored = build_fgn(TINY_CFG, seed=99)
        load_checkpoint(tmp_path / "ckpt").restore(restored)
        restored.eval()
        after = restored(rgb, flow)
        assert torch.equal(before, after)

    def test_manifest_contents(self, tmp_path):
        model = tiny_ssl()
        save_checkpoint(model, tmp_path / "ssl")
        ckpt = load_checkpoint(tmp_path / "ssl")
        assert set(ckpt.groups) == {"rgb", "flow", "merge", "expander"}
        assert ckpt.manifest["metadata"] == {}
        assert ckpt.manifest["model"]["model_type"] == "VicregModel"

    def test_truncated_tensor_names_offender(self, tmp_path):
        from flowgate.data import TruncatedPayload

        model = build_fgn(TINY_CFG, seed=0)
        save_checkpoint(model, tmp_path / "ckpt")
        ckpt = load_checkpoint(tmp_path / "ckpt")
        name = ckpt.tensor_names[0]
        victim = tmp_path / "ckpt" / ckpt.manifest["tensors"][name]
        victim.write_bytes(victim.read_bytes()[:-3])
        with pytest.raises(TruncatedPayload) as info:
            ckpt.tensor(name)
        assert name in str(info.value)

    def test_version_bump_rejected(self, tmp_path):
        model = build_fgn(TINY_CFG, seed=0)
        save_checkpoint(model, tmp_path / "ckpt")
        manifest_path = tmp_path / "ckpt" / "manifest.json"
        manifest = json.loads(manifest_path.read_text())
        manifest["format_version"] = 2
        manifest_path.write_text(json.dumps(manifest))
        with pytest.raises(UnsupportedVersion):
            load_checkpoint(tmp_path / "ckpt")

    def test_corrupt_manifest(self, tmp_path):
        model = build_fgn(TINY_CFG, seed=0)
        save_checkpoint(model, tmp_path / "ckpt")
        (tmp_path / "ckpt" / "manifest.json").write_text("{not json")
        with pytest.raises(CorruptManifest):
            load_checkpoint(tmp_path / "ckpt")

    def test_restore_into_wrong_model(self, tmp_path):
        model = tiny_ssl()
        save_checkpoint(model, tmp_path / "ssl")
        target = build_fgn(TINY_CFG, seed=0)
        with pytest.raises(TensorCountMismatch):
            load_checkpoint(tmp_path / "ssl").restore(target)

    def test_overwrite_is_clean(self, tmp_path):
        model = build_fgn(TINY_CFG, seed=0)
        save_checkpoint(model, tmp_path / "ckpt", metadata={"v": 1})
        save_checkpoint(model, tmp_path / "ckpt", metadata={"v": 2})
        assert load_checkpoint(tmp_path / "ckpt").manifest["metadata"] == {"v": 2}


class TestTransfer:
    def _pretrained(self, tmp_path):
        ssl = tiny_ssl(seed=4)
        # nudge weights so pretrained values differ from any fresh init
        with torch.no_grad():
            for p in ssl.parameters():
                p.add_(0.05)
        save_checkpoint(ssl, tmp_path / "ssl")
        return load_checkpoint(tmp_path / "ssl")

    def test_partial_policy_copies_only_included(self, tmp_path):
        ckpt = self._pretrained(tmp_path)
        target = build_fgn(TINY_CFG, seed=21)
        fresh = build_fgn(TINY_CFG, seed=21)
        report = transfer_weights(target, ckpt, TransferPolicy(include=frozenset({"rgb", "flow"})))
        assert report.copied
        state, fresh_state = target.state_dict(), fresh.state_dict()
        for name in state:
            group = name.split(".", 1)[0]
            if group in ("rgb", "flow"):
                assert torch.equal(state[name], ckpt.tensor(name)), name
            else:
                assert torch.equal(state[name], fresh_state[name]), name

    def test_full_policy_copies_merge_too(self, tmp_path):
        ckpt = self._pretrained(tmp_path)
        target = build_fgn(TINY_CFG, seed=22)
        transfer_weights(target, ckpt, TransferPolicy(include=frozenset({"rgb", "flow", "merge"})))
        state = target.state_dict()
        for name in ckpt.groups["merge"]:
            assert torch.equal(state[name], ckpt.tensor(name))

    def test_missing_group_strict(self, tmp_path):
        ckpt = self._pretrained(tmp_path)
        ckpt.manifest["groups"].pop("flow")
        target = build_fgn(TINY_CFG, seed=23)
        with pytest.raises(MissingGroup):
            transfer_weights(target, ckpt, TransferPolicy(include=frozenset({"rgb", "flow"})))
        # non-strict mode records the skip instead
        report = transfer_weights(
            target, ckpt, TransferPolicy(include=frozenset({"rgb", "flow"}), strict=False)
        )
        assert "flow" in report.skipped

    def test_shape_mismatch(self, tmp_path):
        ckpt = self._pretrained(tmp_path)
        from dataclasses import replace

        wider = replace(TINY_CFG, rgb_channels=(24, 16, 32, 32), flow_channels=(24, 16, 32, 32))
        target = build_fgn(wider, seed=24)
        with pytest.raises(ShapeMismatch):
            transfer_weights(target, ckpt, TransferPolicy(include=frozenset({"rgb"})))

    def test_expander_not_a_valid_group(self):
        with pytest.raises(ValueError):
            TransferPolicy(include=frozenset({"expander"}))
        with pytest.raises(ValueError):
            TransferPolicy(include=frozenset())
