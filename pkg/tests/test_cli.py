"""Every ``hsemis`` subcommand on a small synthetic set, plus exit codes."""

import csv
import json

import numpy as np
import pytest

from hsemis.checkpoint import load_checkpoint
from hsemis.cli import main
from hsemis.data import read_dataset
from hsemis.hstn import read_hstn

SMALL = """\
data.counts=20,12,14,10,6
mirec.steps=10
node.steps=10
baseline.steps=10
node.eval_every=5
sirl.k=5
"""


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "small.cfg").write_text(SMALL)
    return root


def run(work, *argv):
    return main([argv[0], "--config", str(work / "small.cfg"), *argv[1:]])


@pytest.fixture(scope="module")
def dataset(work):
    assert run(work, "synth", "--out", str(work / "ds")) == 0
    assert run(work, "split", "--data", str(work / "ds"), "--out", str(work / "sp")) == 0
    return work


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestPipelineCommands:
    def test_synth(self, dataset):
        ds = read_dataset(dataset / "ds")
        assert len(ds) == 62
        np.testing.assert_array_equal(np.bincount(ds.grades), [20, 12, 14, 10, 6])

    def test_split(self, dataset):
        parts = {n: read_csv(dataset / "sp" / f"{n}.csv") for n in ("labeled", "unlabeled", "test")}
        ids = [r["id"] for rows in parts.values() for r in rows]
        assert len(ids) == len(set(ids)) == 62
        assert {r["grade"] for r in parts["labeled"]} == {"0", "1", "2", "3", "4"}

    def test_mirec_reconstruct_and_label(self, dataset):
        w = dataset
        assert run(w, "mirec-train", "--data", str(w / "ds"), "--ids", str(w / "sp" / "unlabeled.csv"),
                   "--mask-ratio", "0.5", "--out", str(w / "mck")) == 0
        _, meta = load_checkpoint(w / "mck", "mirec-generator")
        assert meta["mask_ratio"] == 0.5
        assert (w / "mck" / "history.csv").read_text().splitlines()[0] == "step,gen_loss,dis_loss,l1"

        assert run(w, "reconstruct", "--ckpt", str(w / "mck"), "--data", str(w / "ds"),
                   "--ids", str(w / "sp" / "unlabeled.csv"), "--out", str(w / "rec")) == 0
        unl = read_csv(w / "sp" / "unlabeled.csv")
        assert read_hstn(w / "rec" / f"{unl[0]['id']}.hstn").shape == (32, 32, 1)

        assert run(w, "sirl-label", "--templates", str(w / "ds"), "--recon", str(w / "rec"), "--tau", "0.5",
                   "--save-templates", str(w / "tpl"), "--out", str(w / "px.csv")) == 0
        assert run(w, "sirl-label", "--templates", str(w / "tpl"), "--recon", str(w / "rec"), "--tau", "0.5",
                   "--out", str(w / "px2.csv")) == 0
        assert (w / "px.csv").read_bytes() == (w / "px2.csv").read_bytes()
        rows = read_csv(w / "px.csv")
        assert len(rows) == len(unl)
        assert set(rows[0]) == {"sample_id", "label", "score"}

    def test_train_node_and_eval(self, dataset):
        w = dataset
        assert run(w, "train-node", "--labeled", str(w / "sp" / "labeled.csv"), "--data", str(w / "ds"),
                   "--left", "3", "--right", "4", "--out", str(w / "node")) == 0
        assert run(w, "eval", "--checkpoint", str(w / "node"), "--data", str(w / "ds"),
                   "--labels", str(w / "sp" / "test.csv"), "--out", str(w / "m.json")) == 0
        metrics = json.loads((w / "m.json").read_text())
        assert set(metrics) == {"acc", "pre", "rec", "f1"}
        assert 0.0 <= metrics["acc"] <= 1.0


class TestExitCodes:
    def test_missing_config(self, work):
        assert main(["run", "--config", str(work / "nope.cfg"), "--out", str(work / "r.json")]) == 2

    def test_unknown_key(self, work):
        (work / "bad.cfg").write_text("node.momentum=0.9\n")
        assert main(["run", "--config", str(work / "bad.cfg"), "--out", str(work / "r.json")]) == 2

    def test_mu_out_of_range(self, work):
        (work / "mu.cfg").write_text("node.mu=1.5\n")
        assert main(["run", "--config", str(work / "mu.cfg"), "--out", str(work / "r.json")]) == 2

    def test_train_node_mu_flag(self, dataset):
        w = dataset
        assert run(w, "train-node", "--labeled", str(w / "sp" / "labeled.csv"), "--data", str(w / "ds"),
                   "--left", "0", "--right", "1", "--mu", "1.5", "--out", str(w / "n2")) == 2

    def test_missing_checkpoint(self, dataset):
        w = dataset
        assert run(w, "reconstruct", "--ckpt", str(w / "none"), "--data", str(w / "ds"), "--out",
                   str(w / "r2")) == 3

    def test_synth_needs_out(self, work):
        assert run(work, "synth") == 2
