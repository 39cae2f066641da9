import numpy as np
import pytest
from conftest import small_config, small_specs

from maa.checkpoint import load_checkpoint, save_checkpoint
from maa.config import TrainConfig, read_config_file
from maa.dataio import GLOBAL, gen_synthetic, split_records
from maa.errors import ConfigError, FormatError, ValidationError
from maa.metrics import read_metrics_csv
from maa.model import MAAModel
from maa.optim import AdamWState
from maa.train import (
    check_compatible,
    evaluate,
    format_ablation_table,
    run_ablation,
    schedule_for,
    train,
)


@pytest.fixture(scope="module")
def data():
    header, recs = gen_synthetic(3, 16, small_specs(text_dropout=0.2), seed=5)
    train_recs, val_recs = split_records(recs, 4, seed=5)
    return header, train_recs, val_recs


def _cfg(**kw):
    base = dict(epochs=2, batch_size=8, lr=3e-3, dropout=0.1, warmup_epochs=1, t0_epochs=1)
    base.update(kw)
    return small_config(**base)


def test_config_defaults_and_text_roundtrip(tmp_path):
    c = TrainConfig()
    assert (c.dim, c.ffn_dim, c.heads, c.layers) == (768, 2048, 8, 2)
    assert (c.lr, c.epochs, c.batch_size) == (3e-5, 50, 8)
    assert (c.weight_decay, c.clip_norm, c.dropout) == (0.01, 1.0, 0.1)
    (tmp_path / "c.txt").write_text("# comment\n" + c.replace(layers=3, pre_ln=True).to_text())
    back = TrainConfig.from_dict(read_config_file(tmp_path / "c.txt"))
    assert back == c.replace(layers=3, pre_ln=True)


@pytest.mark.parametrize(
    "kw", [dict(dim=10, heads=3), dict(adapter_mode="mixed"), dict(precision=16), dict(dropout=1.0), dict(lr=-1.0)]
)
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw)


def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"depth": "2"})


def test_schedule_in_steps():
    s = schedule_for(TrainConfig(warmup_epochs=1, t0_epochs=10, batch_size=8), 800)
    assert (s.warmup_steps, s.t_0, s.base_lr) == (100, 1000, 3e-5)


def test_checkpoint_roundtrip(tmp_path, data):
    header, train_recs, _ = data
    for precision in (32, 64):
        m = MAAModel(small_config(precision=precision), header.dims, 3)
        opt = AdamWState.for_params(m.params())
        opt.t = 7
        for p in m.params():
            opt.m[p.name] += 0.5
        save_checkpoint(tmp_path / "m.ckpt", m, opt, {"epoch": 3})
        ck = load_checkpoint(tmp_path / "m.ckpt")
        assert ck.config == m.config and ck.extra == {"epoch": 3} and ck.optimizer_step == 7
        m2 = ck.build_model()
        for a, b in zip(m.params(), m2.params()):
            assert a.value.dtype == b.value.dtype and a.value.tobytes() == b.value.tobytes()
        st = ck.optimizer_state()
        assert all(np.array_equal(st.m[k], opt.m[k]) for k in opt.m)


def test_checkpoint_format_errors(tmp_path, data):
    header, _, _ = data
    m = MAAModel(small_config(), header.dims, 3)
    save_checkpoint(tmp_path / "m.ckpt", m)
    raw = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "bad.ckpt").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "bad.ckpt")
    (tmp_path / "cut.ckpt").write_bytes(raw[:-3])
    with pytest.raises(FormatError, match="truncated"):
        load_checkpoint(tmp_path / "cut.ckpt")


def test_train_writes_outputs(tmp_path, data):
    header, train_recs, val_recs = data
    res = train(_cfg(), header, train_recs, val_recs, tmp_path / "run")
    out = tmp_path / "run"
    for name in ("config.txt", "metrics.csv", "steps.csv", "last.ckpt", "best.ckpt", "reports/epoch_002_val.json"):
        assert (out / name).exists(), name
    rows = read_metrics_csv(out / "metrics.csv")
    assert [(r["epoch"], r["split"]) for r in rows] == [("1", "train"), ("1", "val"), ("2", "train"), ("2", "val")]
    assert len(res.history) == 2 and 1 <= res.best_epoch <= 2
    ck = load_checkpoint(out / "best.ckpt")
    assert ck.extra["epoch"] == res.best_epoch
    assert not (out / ".lock").exists()


def test_training_is_deterministic(tmp_path, data):
    header, train_recs, val_recs = data
    train(_cfg(), header, train_recs, val_recs, tmp_path / "a")
    train(_cfg(), header, train_recs, val_recs, tmp_path / "b")
    for name in ("metrics.csv", "steps.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


@pytest.mark.parametrize("precision", [32, 64])
def test_resume_is_bit_exact(tmp_path, data, precision):
    header, train_recs, val_recs = data
    cfg = _cfg(epochs=3, precision=precision)
    full = train(cfg, header, train_recs, val_recs, tmp_path / "full")
    train(cfg.replace(epochs=2), header, train_recs, val_recs, tmp_path / "part")
    resumed = train(cfg, header, train_recs, val_recs, tmp_path / "part", resume=tmp_path / "part" / "last.ckpt")
    for name in ("steps.csv", "metrics.csv"):
        assert (tmp_path / "full" / name).read_text() == (tmp_path / "part" / name).read_text()
    for a, b in zip(full.model.params(), resumed.model.params()):
        assert a.value.tobytes() == b.value.tobytes()


def test_resume_rejects_changed_config(tmp_path, data):
    header, train_recs, val_recs = data
    train(_cfg(epochs=1), header, train_recs, val_recs, tmp_path / "r")
    with pytest.raises(ValidationError):
        train(_cfg(epochs=2, lr=1e-2), header, train_recs, val_recs, resume=tmp_path / "r" / "last.ckpt")


def test_locked_directory_is_refused(tmp_path, data):
    header, train_recs, val_recs = data
    (tmp_path / "busy").mkdir()
    (tmp_path / "busy" / ".lock").write_text("123")
    with pytest.raises(RuntimeError, match="locked"):
        train(_cfg(epochs=1), header, train_recs, val_recs, tmp_path / "busy")


def test_modality_subset_uses_only_those_tokens(data):
    header, train_recs, val_recs = data
    res = train(_cfg(modalities="G", epochs=1), header, train_recs, val_recs)
    assert set(res.model.adapter.blocks) == {GLOBAL}
    report, _ = evaluate(res.model, val_recs)
    assert report.n_samples == len(val_recs)


def test_compatibility_checks(data):
    header, _, _ = data
    with pytest.raises(ValidationError):
        check_compatible(small_config(), header, num_classes=4)
    with pytest.raises(ValidationError):
        check_compatible(small_config(), header, input_dims={0: 12, 1: 12, 2: 9})
    g_only, _ = gen_synthetic(3, 2, small_specs()[:1], seed=0)
    with pytest.raises(ValidationError):
        check_compatible(small_config(), g_only)


def test_ablation_table(tmp_path, data):
    header, train_recs, val_recs = data
    rows = run_ablation("layers", ["0", "1"], _cfg(epochs=1), header, train_recs, val_recs, tmp_path / "abl")
    assert [r.value for r in rows] == ["0", "1"]
    assert rows[0].total_params < rows[1].total_params
    text = format_ablation_table("layers", rows)
    assert text.splitlines()[0].split()[:3] == ["layers", "mAP", "accuracy"]
    assert (tmp_path / "abl" / "ablation.csv").exists() and (tmp_path / "abl" / "ablation.txt").exists()
    with pytest.raises(ValidationError):
        run_ablation("heads", ["1"], _cfg(), header, train_recs, val_recs)
