"""Command-line pipeline, config parsing, checkpoint format."""

import os

import numpy as np
import pytest

from ctharm import networks, phantom
from ctharm.checkpoint import (CheckpointError, CheckpointMeta,
                               load_checkpoint, save_checkpoint)
from ctharm.cli import main
from ctharm.config import ConfigError, RunConfig, parse_config
from ctharm.rng import CounterRng


def read_bytes(path):
    with open(path, "rb") as fh:
        return fh.read()


def write_config(path, **kv):
    with open(path, "w") as fh:
        fh.write("# test configuration\n")
        for k, v in kv.items():
            fh.write(f"{k} = {v}\n")
    return str(path)


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------

def test_config_defaults_roundtrip(tmp_path):
    path = write_config(tmp_path / "c.cfg")
    cfg = parse_config(path)
    assert cfg == RunConfig()


def test_config_overrides_and_comments(tmp_path):
    path = write_config(tmp_path / "c.cfg", max_epochs=7, mode="dynamic",
                        lambda_l1=50.0, conditional_disc="false")
    cfg = parse_config(path)
    assert cfg.max_epochs == 7
    assert cfg.mode == "dynamic"
    assert cfg.lambda_l1 == 50.0
    assert cfg.conditional_disc is False


def test_config_unknown_key_reports_line(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("max_epochs = 5\nnot_a_key = 1\n")
    with pytest.raises(ConfigError, match="line 2"):
        parse_config(str(path))


def test_config_bad_value_reports_line(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("\n\nmax_epochs = banana\n")
    with pytest.raises(ConfigError, match="line 3"):
        parse_config(str(path))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _encoder_bundle(seed=1):
    return networks.build_encoder_classifier(CounterRng(seed))


def test_checkpoint_roundtrip_bytes(tmp_path):
    bundle = _encoder_bundle()
    bundle.frozen_names = {n for n in bundle.params if n.startswith("enc.")}
    path = str(tmp_path / "enc.ckpt")
    save_checkpoint(bundle, CheckpointMeta(epoch=3, mode="pretrain", seed=42), path)
    loaded, meta = load_checkpoint(path)
    assert meta.epoch == 3 and meta.mode == "pretrain" and meta.seed == 42
    assert loaded.architecture_id == bundle.architecture_id
    assert loaded.frozen_names == bundle.frozen_names
    for name, p in bundle.params.items():
        assert loaded[name].data.tobytes() == p.data.tobytes()
    # saving the loaded bundle reproduces the file byte for byte
    path2 = str(tmp_path / "enc2.ckpt")
    save_checkpoint(loaded, meta, path2)
    assert read_bytes(path) == read_bytes(path2)


def test_checkpoint_bad_magic_refused(tmp_path):
    path = str(tmp_path / "x.ckpt")
    save_checkpoint(_encoder_bundle(), CheckpointMeta(), path)
    blob = bytearray(read_bytes(path))
    blob[:4] = b"NOPE"
    with open(path, "wb") as fh:
        fh.write(blob)
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_checkpoint_truncation_refused(tmp_path):
    path = str(tmp_path / "x.ckpt")
    save_checkpoint(_encoder_bundle(), CheckpointMeta(), path)
    blob = read_bytes(path)
    with open(path, "wb") as fh:
        fh.write(blob[:len(blob) // 2])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)


def test_checkpoint_frozen_flags_restored(tmp_path):
    enc = _encoder_bundle()
    gan = networks.build_gan(enc, CounterRng(2))
    path = str(tmp_path / "gan.ckpt")
    save_checkpoint(gan, CheckpointMeta(mode="full"), path)
    loaded, _ = load_checkpoint(path)
    assert loaded.frozen_names == gan.frozen_names
    for name in loaded.frozen_names:
        assert not loaded[name].requires_grad


# ---------------------------------------------------------------------------
# CLI end to end (small sizes)
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def datadir(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("cli_data"))
    rc = main(["gen-data", "--out", out, "--count", "12", "--size", "32",
               "--seed", "5", "--nonstandard", "both"])
    assert rc == 0
    return out


def test_gen_data_file_count(tmp_path):
    out = str(tmp_path / "d")
    assert main(["gen-data", "--out", out, "--count", "10", "--size", "32",
                 "--seed", "1", "--nonstandard", "both"]) == 0
    files = sorted(os.listdir(out))
    pgms = [f for f in files if f.endswith(".pgm")]
    assert len(pgms) == 30           # RAW never written
    assert "manifest.csv" in files


def test_gen_data_rerun_byte_identical(tmp_path):
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    for out in (a, b):
        assert main(["gen-data", "--out", out, "--count", "4", "--size", "32",
                     "--seed", "9", "--nonstandard", "br40"]) == 0
    for name in sorted(os.listdir(a)):
        assert read_bytes(os.path.join(a, name)) == read_bytes(os.path.join(b, name)), name


def test_gen_data_size_validation(tmp_path, capsys):
    assert main(["gen-data", "--out", str(tmp_path / "x"), "--count", "1",
                 "--size", "30", "--seed", "1", "--nonstandard", "br40"]) == 1
    assert "size" in capsys.readouterr().err


@pytest.fixture(scope="module")
def encoder_ckpt(datadir, tmp_path_factory):
    # real pre-training on the small set would be flaky; exercise the wiring
    # with a reachable accuracy floor and thresholds tuned for speed
    cfgdir = tmp_path_factory.mktemp("cfg")
    cfg = write_config(cfgdir / "pre.cfg", pretrain_min_acc=0.0,
                       pretrain_max_epochs=1, pretrain_patch=16,
                       split_train=0.67, split_val=0.17, split_test=0.16)
    path = str(cfgdir / "encoder.ckpt")
    rc = main(["pretrain", "--data", datadir, "--out", path, "--config", cfg])
    assert rc == 0
    return path


def test_pretrain_prints_accuracy(datadir, tmp_path, capsys):
    cfg = write_config(tmp_path / "p.cfg", pretrain_min_acc=0.0,
                       pretrain_max_epochs=1, pretrain_patch=16,
                       split_train=0.67, split_val=0.17, split_test=0.16)
    out = str(tmp_path / "enc.ckpt")
    assert main(["pretrain", "--data", datadir, "--out", out, "--config", cfg]) == 0
    captured = capsys.readouterr()
    assert "val_accuracy" in captured.out
    loaded, meta = load_checkpoint(out)
    assert loaded.architecture_id == networks.ENCODER_ARCH
    assert meta.mode == "pretrain"


def test_pretrain_unreachable_accuracy_fails(datadir, tmp_path, capsys):
    cfg = write_config(tmp_path / "p.cfg", pretrain_min_acc=1.01,
                       pretrain_max_epochs=1, pretrain_patch=16,
                       split_train=0.67, split_val=0.17, split_test=0.16)
    assert main(["pretrain", "--data", datadir, "--out", str(tmp_path / "e.ckpt"),
                 "--config", cfg]) == 1
    assert "accuracy" in capsys.readouterr().err


@pytest.fixture(scope="module")
def trained_model(datadir, encoder_ckpt, tmp_path_factory):
    workdir = tmp_path_factory.mktemp("train")
    cfg = write_config(workdir / "t.cfg", max_epochs=2, th_eta=1, batch_size=2,
                       subset_size=2, subset_repeats=1, seed=11,
                       split_train=0.67, split_val=0.17, split_test=0.16)
    model = str(workdir / "model.ckpt")
    rc = main(["train", "--data", datadir, "--encoder", encoder_ckpt,
               "--out", model, "--mode", "full", "--config", cfg])
    assert rc == 0
    return model, cfg, str(workdir)


def test_train_writes_log_and_checkpoint(trained_model):
    model, cfg, workdir = trained_model
    log = os.path.splitext(model)[0] + ".log.csv"
    assert os.path.exists(model)
    lines = open(log).read().splitlines()
    assert lines[0] == "epoch,phase,window_lo,window_hi,d_loss,g_loss,val_acc"
    assert 1 <= len(lines) - 1 <= 30
    bundle, meta = load_checkpoint(model)
    assert bundle.architecture_id.startswith("gan1-")
    assert meta.mode == "full"


def test_train_deterministic_checkpoint(datadir, encoder_ckpt, tmp_path):
    cfg = write_config(tmp_path / "t.cfg", max_epochs=1, th_eta=1, batch_size=2,
                       seed=21, split_train=0.67, split_val=0.17, split_test=0.16)
    outs = []
    for name in ("m1.ckpt", "m2.ckpt"):
        path = str(tmp_path / name)
        assert main(["train", "--data", datadir, "--encoder", encoder_ckpt,
                     "--out", path, "--mode", "fixed", "--config", cfg]) == 0
        outs.append(read_bytes(path))
    assert outs[0] == outs[1]


def test_train_rejects_model_checkpoint_as_encoder(trained_model, datadir, tmp_path, capsys):
    model, cfg, _ = trained_model
    assert main(["train", "--data", datadir, "--encoder", model,
                 "--out", str(tmp_path / "m.ckpt"), "--mode", "fixed",
                 "--config", cfg]) == 1
    assert "encoder" in capsys.readouterr().err


def test_harmonize_cli(trained_model, datadir, tmp_path):
    model, cfg, _ = trained_model
    src = os.path.join(datadir, sorted(f for f in os.listdir(datadir)
                                       if f.endswith("_br40.pgm"))[0])
    out1 = str(tmp_path / "h1.pgm")
    out2 = str(tmp_path / "h2.pgm")
    assert main(["harmonize", "--model", model, "--in", src, "--out", out1,
                 "--config", cfg]) == 0
    assert main(["harmonize", "--model", model, "--in", src, "--out", out2,
                 "--config", cfg]) == 0
    assert read_bytes(out1) == read_bytes(out2)
    img = phantom.read_image(out1)
    assert img.pixels.min() >= -1024 and img.pixels.max() <= 1000
    assert img.kernel_tag == phantom.KERNEL_SYNTHETIC


def test_evaluate_cli(datadir, trained_model, tmp_path):
    model, _, _ = trained_model
    # route almost everything into the test split for this check
    cfg = write_config(tmp_path / "e.cfg", split_train=0.084, split_val=0.083,
                       split_test=0.833)
    report1 = str(tmp_path / "r1.csv")
    report2 = str(tmp_path / "r2.csv")
    assert main(["evaluate", "--model", model, "--data", datadir,
                 "--report", report1, "--config", cfg]) == 0
    assert main(["evaluate", "--model", model, "--data", datadir,
                 "--report", report2, "--config", cfg]) == 0
    assert read_bytes(report1) == read_bytes(report2)
    lines = open(report1).read().splitlines()
    assert lines[0] == "condition,roi_lo,roi_hi,feature_name,ccc"
    conditions = {ln.split(",")[0] for ln in lines[1:] if not ln.startswith("condition")}
    assert {"input", "harmonized"} <= conditions
    for ln in lines[1:]:
        parts = ln.split(",")
        if parts[0] in ("input", "harmonized") and len(parts) == 5:
            assert -1.0 - 1e-9 <= float(parts[4]) <= 1.0 + 1e-9


def test_cam_cli(trained_model, datadir, tmp_path):
    model, cfg, _ = trained_model
    files = sorted(os.listdir(datadir))
    src = os.path.join(datadir, [f for f in files if f.endswith("_br40.pgm")][0])
    tgt = os.path.join(datadir, [f for f in files if f.endswith("_bl64.pgm")][0])
    out1 = str(tmp_path / "cam1.pgm")
    out2 = str(tmp_path / "cam2.pgm")
    for out in (out1, out2):
        assert main(["cam", "--model", model, "--in", src, "--target", tgt,
                     "--out", out, "--config", cfg]) == 0
    assert read_bytes(out1) == read_bytes(out2)
    values, _ = phantom.read_pgm16(out1)
    assert values.max() <= 65535


def test_cam_zeroed_discriminator_writes_zero_file(trained_model, tmp_path):
    model, cfg, _ = trained_model
    bundle, meta = load_checkpoint(model)
    bundle["disc.l4.w"].data[:] = 0.0
    bundle["disc.l4.b"].data[:] = 0.0
    zeroed = str(tmp_path / "zero.ckpt")
    save_checkpoint(bundle, meta, zeroed)
    img = phantom.CtImage(32, 32, np.zeros((32, 32), dtype=np.int32),
                          phantom.KERNEL_RAW, 0, 0)
    src = str(tmp_path / "src.pgm")
    phantom.write_image(img, src)
    out = str(tmp_path / "cam.pgm")
    assert main(["cam", "--model", zeroed, "--in", src, "--target", src,
                 "--out", out, "--config", cfg]) == 0
    values, _ = phantom.read_pgm16(out)
    assert values.max() == 0


def test_harmonize_rejects_encoder_checkpoint(encoder_ckpt, tmp_path, capsys):
    img = phantom.CtImage(32, 32, np.zeros((32, 32), dtype=np.int32),
                          phantom.KERNEL_RAW, 0, 0)
    src = str(tmp_path / "s.pgm")
    phantom.write_image(img, src)
    assert main(["harmonize", "--model", encoder_ckpt, "--in", src,
                 "--out", str(tmp_path / "o.pgm")]) == 1
    assert "enc1" in capsys.readouterr().err


def test_cli_errors_exit_nonzero(tmp_path, capsys):
    assert main(["harmonize", "--model", str(tmp_path / "missing.ckpt"),
                 "--in", "x.pgm", "--out", "y.pgm"]) == 1
    assert "error:" in capsys.readouterr().err
