import json
import math
from pathlib import Path

import numpy as np
import pytest

from tnmera import autodiff, checkpoint, cli, data, mera, train
from tnmera.data import Dataset
from tnmera.tensor import rng_stream

HERE = Path(__file__).resolve().parent
MNIST = HERE.parent / "data" / "mnist"


def tiny_dataset(n=12, size=8, classes=3, seed=0):
    rng = rng_stream(seed, "tiny")
    return Dataset(rng.random((n, size, size)), np.arange(n) % classes, classes)


def tiny_config(tmp_path, **kw):
    base = dict(block_size=2, bond_dim=2, epochs=2, batch_size=4, single_thread=True,
                out_dir=str(tmp_path / "run"))
    base.update(kw)
    return train.TrainConfig(**base)


# -- checkpoint -------------------------------------------------------------------

def test_checkpoint_roundtrip_bitwise(tmp_path):
    m = mera.build(mera.MeraConfig(image_height=16, image_width=16, block_size=2, bond_dim=3,
                                   num_classes=4, init_mode="qr"), seed=7)
    checkpoint.save(m, tmp_path / "m.ckpt", extra={"k": 1})
    back, extra = checkpoint.load_with_extra(tmp_path / "m.ckpt")
    assert back.config == m.config and extra == {"k": 1}
    assert list(back.params) == list(m.params)
    for name, t in m.params.items():
        assert back.params[name].tobytes() == t.tobytes()
    assert checkpoint.to_bytes(back, {"k": 1}) == (tmp_path / "m.ckpt").read_bytes()


def test_checkpoint_errors(tmp_path):
    m = mera.build(mera.MeraConfig(image_height=8, image_width=8, block_size=2, bond_dim=2), seed=0)
    raw = checkpoint.to_bytes(m)
    with pytest.raises(checkpoint.CheckpointError, match="payload"):
        checkpoint.from_bytes(raw[:-8])
    with pytest.raises(checkpoint.CheckpointError, match="magic"):
        checkpoint.from_bytes(b"NOTMERA\n" + raw[8:])
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.from_bytes(raw[:12])
    other = mera.MeraConfig(image_height=8, image_width=8, block_size=2, bond_dim=2, num_classes=3)
    with pytest.raises(checkpoint.CheckpointError, match="config"):
        checkpoint.from_bytes(raw, expect_config=other)


def test_checkpoint_header_layout():
    m = mera.build(mera.MeraConfig(image_height=8, image_width=8, block_size=2, bond_dim=2), seed=0)
    header, base = checkpoint.read_header(checkpoint.to_bytes(m))
    offset = 0
    for entry in header["tensors"]:
        assert entry["offset"] == offset
        offset += entry["nbytes"]
    assert offset == header["payload_bytes"]
    assert header["config"] == m.config.to_dict()


def test_fixture_checkpoint_still_loads():
    model = checkpoint.load(HERE / "data" / "fixture_v1.ckpt")
    want = json.loads((HERE / "data" / "fixture_v1.json").read_text())
    for name, total in want["param_sum"].items():
        assert float(model.params[name].sum()) == total
    imgs = rng_stream(want["images_seed"], "fixture").random((2, 8, 8))
    np.testing.assert_allclose(mera.forward_logits(model, imgs), want["logits"], rtol=1e-12)


# -- training ----------------------------------------------------------------------

def test_config_file_parsing():
    raw = train.parse_config_text("lr = 0.01  # comment\nbatch-size = 8\n\nsingle_thread = true\n")
    vals = train.coerce_config(raw)
    assert vals == {"lr": 0.01, "batch_size": 8, "single_thread": True}
    with pytest.raises(ValueError):
        train.coerce_config({"nope": "1"})
    with pytest.raises(ValueError):
        train.parse_config_text("just words")


def test_config_validation():
    for bad in (dict(lr=0.0), dict(epochs=0), dict(val_fraction=1.0), dict(optimizer="rmsprop")):
        with pytest.raises(ValueError):
            train.TrainConfig(**bad).validate()


def test_initial_loss_near_ln10(tmp_path):
    ds = Dataset(rng_stream(0, "ln10").random((20, 16, 16)), np.arange(20) % 10, 10)
    cfg = tiny_config(tmp_path, epochs=1, layout="block", bond_dim=4)
    model = mera.build(cfg.mera_config(16, 16, 10), seed=0)
    assert abs(train.mean_loss(model, ds) - math.log(10)) <= 0.05


def test_train_writes_run_directory(tmp_path):
    cfg = tiny_config(tmp_path, optimizer="adaptive", lr=1e-2, init_mode="qr", val_fraction=0.25)
    result = train.train(cfg, tiny_dataset())
    out = Path(cfg.out_dir)
    lines = (out / "metrics.csv").read_text().splitlines()
    assert lines[0] == "epoch,step,loss,train_acc,val_acc,wall_ms"
    assert len(lines) == 1 + 1 + cfg.epochs
    for row in result.metrics:
        assert math.isfinite(row["loss"]) and row["loss"] >= 0
        assert 0 <= row["train_acc"] <= 1 and 0 <= row["val_acc"] <= 1
    assert json.loads((out / "config.json").read_text())["lr"] == 1e-2
    model, extra = checkpoint.load_with_extra(out / "model.ckpt")
    assert extra["train_config"]["lr"] == 1e-2
    assert model.config == result.model.config


def test_single_thread_run_is_reproducible(tmp_path):
    snapshots = []
    for _ in range(2):
        cfg = tiny_config(tmp_path, optimizer="adaptive", lr=1e-2, init_mode="qr", val_fraction=0.25)
        train.train(cfg, tiny_dataset())
        out = Path(cfg.out_dir)
        snapshots.append({name: (out / name).read_bytes() for name in ("metrics.csv", "model.ckpt")})
    assert snapshots[0] == snapshots[1]


def test_chunked_gradients_match_whole_batch():
    m = mera.build(mera.MeraConfig(image_height=8, image_width=8, block_size=2, bond_dim=2,
                                   num_classes=3, init_mode="qr"), seed=1)
    ds = tiny_dataset(n=8)
    loss1, g1, _ = train.loss_and_grads(m, ds.images, ds.labels)
    loss2, g2, _ = train.loss_and_grads(m, ds.images, ds.labels, chunk_size=3)
    loss3, g3, _ = train.loss_and_grads(m, ds.images, ds.labels, chunk_size=3, workers=3)
    assert loss1 == pytest.approx(loss2, rel=1e-13)
    for k in g1:
        np.testing.assert_allclose(g1[k], g2[k], rtol=1e-10, atol=1e-15)
        assert np.array_equal(g2[k], g3[k])


def test_nan_aborts_with_tensor_name(tmp_path):
    cfg = tiny_config(tmp_path, init_mode="qr")
    ds = tiny_dataset()
    model = mera.build(cfg.mera_config(8, 8, 3), seed=0)
    model.params["iso.0.1.0"] = model.params["iso.0.1.0"].copy()
    model.params["iso.0.1.0"][0, 0, 0, 0, 0] = np.nan
    with pytest.raises(train.NumericalError, match="iso.0.1.0"):
        train.train(cfg, ds, model=model, write=False)


def test_retraction_keeps_isometries(tmp_path):
    cfg = tiny_config(tmp_path, init_mode="qr", optimizer="adaptive", lr=1e-2, retract=True)
    result = train.train(cfg, tiny_dataset(), write=False)
    assert mera.constraint_residual(result.model) <= 1e-12


def test_float32_mode(tmp_path):
    cfg = tiny_config(tmp_path, init_mode="qr", precision="float32", epochs=1)
    result = train.train(cfg, tiny_dataset(), write=False)
    assert all(t.dtype == np.float32 for t in result.model.params.values())


def test_memorizes_tiny_set_and_stops_early(tmp_path):
    cfg = tiny_config(tmp_path, optimizer="adaptive", lr=1e-2, init_mode="qr", layout="block", epochs=60,
                      batch_size=6, target_train_acc=1.0)
    result = train.train(cfg, tiny_dataset(n=6), write=False)
    assert result.metrics[-1]["train_acc"] == 1.0
    assert all(r["train_acc"] < 1.0 for r in result.metrics[:-1])
    assert result.metrics[-1]["epoch"] < 60


def test_evaluate_confusion(tmp_path):
    m = mera.build(mera.MeraConfig(image_height=8, image_width=8, block_size=2, bond_dim=2,
                                   num_classes=3, init_mode="qr"), seed=2)
    ds = tiny_dataset(n=10)
    ev = train.evaluate(m, ds)
    assert ev.confusion.sum(axis=1).tolist() == np.bincount(ds.labels, minlength=3).tolist()
    assert ev.accuracy == float(np.mean(mera.predict(m, ds.images) == ds.labels))
    m.params["top"] = np.zeros_like(m.params["top"])
    ev = train.evaluate(m, ds)
    assert ev.accuracy == float(np.mean(ds.labels == 0))
    train.write_confusion(tmp_path / "c.csv", ev.confusion)
    assert (tmp_path / "c.csv").read_text().splitlines()[0] == "label,pred_0,pred_1,pred_2"
    with pytest.raises(mera.GeometryError):
        train.evaluate(m, tiny_dataset(size=16))


# -- gradient check -------------------------------------------------------------------

def test_gradcheck_passes():
    rep = train.gradcheck(train.gradcheck_config(), seed=0)
    assert rep.passed and rep.max_rel_err <= 1e-6


def test_gradcheck_catches_corrupted_vjp():
    def bad(g, node, tape):
        a, b = (tape.nodes[k].value for k in node.args)
        ga, gb = autodiff._contract_vjp(g, a, b, node.attrs["pairs"], node.attrs["batch"])
        return 1.01 * ga, gb

    autodiff.VJP_OVERRIDES["contract"] = bad
    try:
        rep = train.gradcheck(train.gradcheck_config(), seed=0)
    finally:
        autodiff.VJP_OVERRIDES.clear()
    assert not rep.passed


# -- CLI --------------------------------------------------------------------------------

def test_cli_gradcheck_exit_codes():
    assert cli.main(["gradcheck", "--seeds", "0", "1"]) == 0
    assert cli.main(["gradcheck", "--bond-dim", "1"]) == 1


def test_cli_entropy(tmp_path, capsys):
    out = tmp_path / "rep.csv"
    assert cli.main(["entropy", "--function", "bell", "--geometry", "2x2", "--cuts", "v1", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "cut_id,|A|,L_AB,S_bits,bound_bits,ok"
    assert lines[1].startswith("v1,2,2,1,2,true")
    assert cli.main(["entropy", "--function", "local:3", "--geometry", "4x3"]) == 0
    assert cli.main(["entropy", "--function", "nonsense", "--geometry", "2x2"]) == 1


def test_cli_gen_needle_train_eval(tmp_path, capsys):
    needle = tmp_path / "needle"
    assert cli.main(["gen-needle", "--out", str(needle), "--source", str(MNIST), "--count-per-class", "4",
                     "--num-distractors", "1", "--source-range", "0:2000"]) == 0
    manifest = json.loads((needle / "manifest.json").read_text())
    assert manifest["o2i_percent"] == 19.1406 and len(manifest["records"]) == 8

    conf = tmp_path / "train.cfg"
    conf.write_text(f"train_data = {needle}\nblock_size = 16\nbond_dim = 2\nepochs = 3\nlr = 0.5\n")
    run = tmp_path / "run"
    code = cli.main(["train", "--config", str(conf), "--out-dir", str(run), "--epochs", "1",
                     "--layout", "block", "--init-mode", "qr", "--single-thread"])
    assert code == 0
    echo = json.loads((run / "config.json").read_text())
    assert echo["epochs"] == 1 and echo["lr"] == 0.5 and echo["block_size"] == 16
    capsys.readouterr()
    assert cli.main(["eval", "--checkpoint", str(run / "model.ckpt"), "--data", str(needle)]) == 0
    report = json.loads(capsys.readouterr().out)
    preds = mera.predict(checkpoint.load(run / "model.ckpt"), data.load_any(str(needle)).images)
    assert report["accuracy"] == float(np.mean(preds == data.load_any(str(needle)).labels))
    rows = (run / "confusion.csv").read_text().splitlines()
    assert len(rows) == 3


def test_cli_train_validation_error(tmp_path):
    assert cli.main(["train", "--train-data", str(MNIST) + "[0:4]", "--lr", "-1", "--out-dir", str(tmp_path)]) == 1
    assert cli.main(["train", "--train-data", str(tmp_path / "missing")]) == 1


def test_cli_train_numeric_failure(tmp_path):
    # an enormous learning rate drives the logits to overflow
    code = cli.main(["train", "--train-data", str(MNIST) + "[0:8]", "--resize", "8", "--block-size", "2",
                     "--bond-dim", "2", "--init-mode", "qr", "--optimizer", "sgd", "--lr", "1e30",
                     "--epochs", "3", "--batch-size", "4", "--out-dir", str(tmp_path / "r")])
    assert code == 2
