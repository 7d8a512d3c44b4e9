import numpy as np
import pytest

from lipprox.certify import CSV_COLUMNS, CertReport
from lipprox.config import parse_config
from lipprox.layers import network_lipschitz
from lipprox.pipeline import (
    build_model,
    certify_stage,
    emit_report,
    load_dataset,
    pretrain,
    read_reports,
    run_experiment,
)
from conftest import write_mnist_like

BLOBS = """
[dataset]
kind = "blobs"
n = 240
classes = 3
dim = 6
spread = 0.4
n_test = 60
[model]
kind = "mlp"
hidden = [16]
[pretrain]
epochs = 3
lr = 0.05
[constrain]
beta = 0.02
eta = 0.5
T = 20
trace_samples = 100
finetune_epochs = 1
[evaluate]
eps = 0.1
pgd_steps = 5
n_pairs = 50
"""


def test_blob_split():
    (xtr, ytr), (xte, yte) = load_dataset(parse_config(BLOBS).dataset)
    assert xtr.shape == (180, 6) and xte.shape == (60, 6)


def test_mnist_split(tmp_path):
    images, labels = write_mnist_like(tmp_path, 30)
    cfg = parse_config(f'[dataset]\nimages = "{images}"\nlabels = "{labels}"\nn_train = 12\nn_test = 10\n')
    (xtr, ytr), (xte, yte) = load_dataset(cfg.dataset)
    assert xtr.shape == (12, 1, 28, 28) and xte.shape == (10, 1, 28, 28)


def test_mnist_separate_test_files(tmp_path):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    tr = write_mnist_like(tmp_path / "a", 20, seed=0)
    te = write_mnist_like(tmp_path / "b", 8, seed=1)
    cfg = parse_config(f'[dataset]\nimages = "{tr[0]}"\nlabels = "{tr[1]}"\n'
                       f'test_images = "{te[0]}"\ntest_labels = "{te[1]}"\nn_test = 5\n')
    (xtr, _), (xte, _) = load_dataset(cfg.dataset)
    assert len(xtr) == 20 and len(xte) == 5


@pytest.mark.parametrize("kind", ["mlp", "conv", "vit"])
def test_build_model(kind):
    cfg = parse_config(f'[model]\nkind = "{kind}"\nhidden = [8]\nchannels = [2, 2]\npatch = 7\nlayers = 1\n'
                       'embed_dim = 8\nheads = 2\nmlp_ratio = 1\n')
    net = build_model(cfg.model, (1, 28, 28), 10, seed=0)
    assert net.forward(np.zeros((1, 28, 28))).shape == (10,)


def test_pretrain_checkpoint(tmp_path):
    cfg = parse_config(BLOBS)
    net, info = pretrain(cfg, checkpoint=tmp_path / "n.ckpt")
    assert (tmp_path / "n.ckpt").exists()
    assert info["clean_acc"] > 0.6
    assert info["lipschitz"] == network_lipschitz(net)


def test_run_experiment(tmp_path):
    cfg = parse_config(BLOBS)
    path = tmp_path / "r.csv"
    source, constrained, reports, details = run_experiment(cfg, report_path=path)
    assert [r.model for r in reports] == ["mlp-standard", "mlp-constrained"]
    assert reports[1].lipschitz_upper < reports[0].lipschitz_upper
    assert read_reports(path) == reports
    assert "finetune" in details["constrain"]


def test_runs_are_byte_identical(tmp_path):
    cfg = parse_config(BLOBS)
    run_experiment(cfg, report_path=tmp_path / "a.csv")
    run_experiment(cfg, report_path=tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_emit_report_header_once(tmp_path):
    rep = CertReport(0.5, 0.9, 0.8, 0.1, 3.0, 1.0, 10, 5, "x")
    path = tmp_path / "r.csv"
    emit_report(rep, path)
    emit_report(rep, path)
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(CSV_COLUMNS)
    assert lines[1] == lines[2] == "x,0.5,0.9,0.8,0.1,3.0,1.0,10,5"


def test_read_reports_rejects_other_files(tmp_path):
    path = tmp_path / "r.csv"
    path.write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        read_reports(path)


def test_certify_stage_subsample():
    cfg = parse_config(BLOBS + "samples = 7\n")
    data = load_dataset(cfg.dataset)
    net, _ = pretrain(cfg, data)
    rep = certify_stage(net, cfg, data, eps=0.0)
    assert rep.sample_count == 7 and rep.cert_acc == rep.clean_acc
