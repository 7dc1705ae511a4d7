import json

import numpy as np
import pytest

from xmd.data import apply_standardizer, fit_standardizer
from xmd.mapping import LinearMapper, VaeConfig, VaeMapper, load_checkpoint, parameter_digest
from xmd.training import PUBLISHED_SETTINGS, TrainConfig, TrainingError, published_preset, train
from xmd.synthetic import SyntheticSpec, generate_synthetic


@pytest.fixture(scope="module")
def small():
    bundle = generate_synthetic(SyntheticSpec(n_train=200, n_test=200, voxels=64, D=16, n_classes=10, seed=1))
    stats = fit_standardizer(bundle.splits["train"])
    tr = [apply_standardizer(r, stats) for r in bundle.splits["train"]]
    te = [apply_standardizer(r, stats) for r in bundle.splits["test"]]
    return bundle, tr, te, stats


def cfg(**kw):
    base = dict(lr=1e-3, batch_size=50, tau1=0.05, tau2=0.1, weight_decay=0.0, epochs=3, seed=7)
    base.update(kw)
    return TrainConfig(**base)


class TestConfig:
    @pytest.mark.parametrize("kw", [{"tau1": 0}, {"tau2": -1}, {"alpha": 1.5}, {"batch_size": 1},
                                    {"modality": "X"}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_defaults(self):
        c = TrainConfig()
        assert (c.lr, c.beta1, c.beta2, c.eps) == (4.5e-5, 0.9, 0.999, 1e-8)
        assert c.epochs == 300 and c.patience == 50

    def test_unknown_field(self):
        with pytest.raises(ValueError, match="unknown"):
            TrainConfig.from_dict({"lr": 1.0, "momentum": 0.9})

    def test_presets(self):
        c = published_preset("GOD", "vae", 1)
        assert (c.batch_size, c.weight_decay, c.tau1, c.tau2) == (400, 2.0, 0.05, 0.1)
        c = published_preset("nsd", "vae", 0)
        assert (c.batch_size, c.weight_decay, c.tau1, c.tau2) == (640, 35.0, 0.01, 0.05)
        assert published_preset("nsd", "linear", 3).weight_decay == 3.0
        for (ds, _), s in PUBLISHED_SETTINGS.items():
            assert len(s["tau2"]) == (5 if ds == "god" else 4)


class TestTrain:
    def test_deterministic(self, small):
        bundle, tr, te, _ = small
        p = bundle.provider()
        runs = []
        for _ in range(2):
            m = LinearMapper(64, 16, seed=0)
            res = train(m, tr, p, p, cfg(), selection_records=te)
            runs.append(([h["loss"] for h in res.history], parameter_digest(m)))
        assert runs[0] == runs[1]

    def test_lr_zero_is_bitwise_noop(self, small):
        bundle, tr, _, _ = small
        m = LinearMapper(64, 16, seed=0)
        before = parameter_digest(m)
        train(m, tr, bundle.provider(), bundle.provider(), cfg(lr=0.0))
        assert parameter_digest(m) == before

    def test_lr_zero_weight_decay_only(self, small):
        # AdamW decay is scaled by lr, so lr=0 leaves parameters untouched even with decay
        bundle, tr, _, _ = small
        m = LinearMapper(64, 16, seed=0)
        before = parameter_digest(m)
        train(m, tr, bundle.provider(), bundle.provider(), cfg(lr=0.0, weight_decay=5.0))
        assert parameter_digest(m) == before

    def test_improves_over_baseline(self, small):
        bundle, tr, te, _ = small
        m = LinearMapper(64, 16, seed=0)
        res = train(m, tr, bundle.provider(), bundle.provider(), cfg(epochs=40, modality="V"), selection_records=te)
        chance = np.mean([k / len(te) for k in (1, 5, 10)]) * 100
        base = res.history[0]["selection_metric"]
        assert res.best_metric - base >= 10 * chance
        assert res.best_metric == max(h["selection_metric"] for h in res.history)

    def test_log_and_checkpoint(self, small, tmp_path):
        bundle, tr, te, stats = small
        m = LinearMapper(64, 16, seed=0)
        res = train(m, tr, bundle.provider(), bundle.provider(), cfg(), selection_records=te, stats=stats,
                    log_path=tmp_path / "log.jsonl")
        lines = [json.loads(x) for x in (tmp_path / "log.jsonl").read_text().splitlines()]
        assert [x["epoch"] for x in lines] == [0, 1, 2, 3]
        assert set(lines[1]) == {"epoch", "loss", "L_FI", "L_FT", "selection_metric"}
        from xmd.mapping import save_checkpoint

        save_checkpoint(tmp_path / "m.ckpt", res.checkpoint)
        ck = load_checkpoint(tmp_path / "m.ckpt")
        assert ck.metadata["best_epoch"] == res.best_epoch
        assert ck.space_id == bundle.space_id

    def test_modality_terms(self, small):
        bundle, tr, _, _ = small
        p = bundle.provider()
        h_v = train(LinearMapper(64, 16), tr, p, p, cfg(epochs=1, modality="V")).history[-1]
        h_t = train(LinearMapper(64, 16), tr, p, p, cfg(epochs=1, modality="T")).history[-1]
        assert h_v["L_FT"] is None and h_v["L_FI"] is not None
        assert h_t["L_FI"] is None and h_t["L_FT"] is not None

    def test_early_stop(self, small):
        bundle, tr, te, _ = small
        res = train(LinearMapper(64, 16), tr, bundle.provider(), bundle.provider(),
                    cfg(lr=0.0, epochs=20, patience=3), selection_records=te)
        assert res.history[-1]["epoch"] == 3 and res.best_epoch == 0

    def test_nan_aborts(self, small):
        bundle, tr, _, _ = small
        bad = [r.with_signal(np.full(64, np.nan)) for r in tr]
        with pytest.raises(TrainingError, match="epoch 1, step 0"):
            train(LinearMapper(64, 16), bad, bundle.provider(), bundle.provider(), cfg())

    def test_vae_needs_frozen_decoder(self, small):
        bundle, tr, _, _ = small
        m = VaeMapper(64, 16, VaeConfig(latent_dim=8, hidden=16))
        with pytest.raises(TrainingError, match="frozen"):
            train(m, tr, bundle.provider(), bundle.provider(), cfg())
        m.decoder.freeze()
        dec = parameter_digest(m.decoder)
        train(m, tr, bundle.provider(), bundle.provider(), cfg(epochs=2))
        assert parameter_digest(m.decoder) == dec

    def test_tiny_dataset(self, small):
        bundle, tr, _, _ = small
        with pytest.raises(TrainingError, match="at least two"):
            train(LinearMapper(64, 16), tr[:1], bundle.provider(), bundle.provider(), cfg())

    def test_cache_miss(self, small):
        from xmd.embeddings import CacheMiss, TableProvider

        bundle, tr, _, _ = small
        empty = TableProvider({}, {}, "x", dimension=16)
        with pytest.raises(CacheMiss):
            train(LinearMapper(64, 16), tr, empty, empty, cfg())
