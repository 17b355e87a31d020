import csv
import json

import pytest

from eigenformer.checkpoint import load_checkpoint, save_checkpoint
from eigenformer.cli import main
from eigenformer.config import TrainConfig
from eigenformer.data import read_cache, write_graph_lines
from eigenformer.graph import Target, build_graph
from eigenformer.model import EigenformerModel
from eigenformer.training import state_dict

GEN = "gen:sbm:count=8,n=8,seed=4"
SMALL = dict(task="node-classification", layers=1, heads=2, hidden_dim=8, phi_hidden_dim=8,
             batch_size=4, max_epochs=3, warmup_epochs=1, lr=1e-2)


def _config(tmp_path, name="cfg.json", **kw):
    p = tmp_path / name
    p.write_text(json.dumps({**SMALL, **kw}))
    return str(p)


@pytest.fixture
def cached(tmp_path):
    cache = tmp_path / "c.eigs"
    assert main(["precompute", "--input", GEN, "--output", str(cache)]) == 0
    return str(cache)


@pytest.fixture
def trained(tmp_path, cached):
    run = tmp_path / "run"
    assert main(["train", "--config", _config(tmp_path), "--data", GEN, "--cache", cached,
                 "--out", str(run)]) == 0
    return run


class TestPrecompute:
    def test_path3(self, tmp_path, capsys):
        src = tmp_path / "p3.jsonl"
        write_graph_lines(src, [build_graph(3, [(0, 1), (1, 2)], target=Target("graph-scalar", 0.0))])
        out = tmp_path / "p3.eigs"
        assert main(["precompute", "--input", str(src), "--output", str(out)]) == 0
        text = capsys.readouterr().out
        assert "graphs processed: 1" in text and "max sigma: 1.0" in text
        assert len(read_cache(out)) == 1

    def test_byte_stable_across_runs_and_workers(self, tmp_path):
        spec = "gen:er:count=20,n=6,n_max=12,p=0.4,seed=2"
        for name, w in (("a", "1"), ("b", "1"), ("c", "3")):
            assert main(["precompute", "--input", spec, "--output", str(tmp_path / name),
                         "--workers", w]) == 0
        a = (tmp_path / "a").read_bytes()
        assert a == (tmp_path / "b").read_bytes() == (tmp_path / "c").read_bytes()

    def test_disconnected_input(self, tmp_path, capsys):
        src = tmp_path / "bad.jsonl"
        src.write_text('{"n": 2, "edges": [[0, 1]], "y": 0}\n{"n": 4, "edges": [[0, 1], [2, 3]], "y": 1}\n')
        assert main(["precompute", "--input", str(src), "--output", str(tmp_path / "o")]) == 2
        assert "line 2" in capsys.readouterr().err
        assert not (tmp_path / "o").exists()


class TestTrain:
    def test_artifacts(self, trained):
        for name in ("config.json", "manifest.json", "log.jsonl", "timing.jsonl", "best.ckpt", "metrics.json"):
            assert (trained / name).exists(), name
        lines = (trained / "log.jsonl").read_text().splitlines()
        assert len(lines) == 3
        assert set(json.loads(lines[0])) == {"epoch", "lr", "train_loss", "val_metric"}
        assert "train" in json.loads((trained / "metrics.json").read_text())

    def test_seeded_runs_identical(self, tmp_path, cached, trained):
        again = tmp_path / "again"
        assert main(["train", "--config", _config(tmp_path), "--data", GEN, "--cache", cached,
                     "--out", str(again)]) == 0
        for name in ("log.jsonl", "best.ckpt", "metrics.json"):
            assert (again / name).read_bytes() == (trained / name).read_bytes()

    def test_seed_flag_changes_run(self, tmp_path, cached, trained):
        other = tmp_path / "other"
        assert main(["--seed", "5", "train", "--config", _config(tmp_path), "--data", GEN,
                     "--cache", cached, "--out", str(other)]) == 0
        assert (other / "log.jsonl").read_bytes() != (trained / "log.jsonl").read_bytes()

    def test_cache_miss_names_digest(self, tmp_path, cached, capsys):
        rc = main(["train", "--config", _config(tmp_path), "--data", "gen:sbm:count=8,n=8,seed=5",
                   "--cache", cached, "--out", str(tmp_path / "r")])
        assert rc == 2
        err = capsys.readouterr().err
        assert "train graph 0" in err and "digest" in err
        assert not (tmp_path / "r" / "log.jsonl").exists()

    def test_config_problems_all_reported(self, tmp_path, capsys):
        cfg = _config(tmp_path, layers=0, dropout=2.0, pooling="max")
        assert main(["train", "--config", cfg, "--data", GEN, "--out", str(tmp_path / "r")]) == 2
        err = capsys.readouterr().err
        assert "layers" in err and "dropout" in err and "pooling" in err

    def test_head_task_mismatch(self, tmp_path, capsys):
        cfg = _config(tmp_path, task="graph-regression")
        assert main(["train", "--config", cfg, "--data", GEN, "--out", str(tmp_path / "r")]) == 2


class TestEval:
    def test_repeatable(self, tmp_path, cached, trained):
        args = ["eval", "--checkpoint", str(trained / "best.ckpt"), "--data", GEN, "--cache", cached]
        assert main(args + ["--out", str(tmp_path / "e1.json")]) == 0
        assert main(args + ["--out", str(tmp_path / "e2.json")]) == 0
        assert (tmp_path / "e1.json").read_bytes() == (tmp_path / "e2.json").read_bytes()
        assert "accuracy" in json.loads((tmp_path / "e1.json").read_text())

    def test_config_mismatch_rejected(self, tmp_path, cached, trained, capsys):
        rc = main(["eval", "--checkpoint", str(trained / "best.ckpt"), "--data", GEN, "--cache", cached,
                   "--config", _config(tmp_path, "other.json", hidden_dim=16)])
        assert rc == 2 and "digest" in capsys.readouterr().err
        assert main(["eval", "--checkpoint", str(trained / "best.ckpt"), "--data", GEN,
                     "--config", str(trained / "config.json")]) == 0


class TestInspect:
    def test_untrained_outputs(self, tmp_path, cached):
        cfg = TrainConfig(**SMALL)
        from eigenformer.data import load_graphs
        _, manifest = load_graphs(GEN, cfg.task)
        ckpt = tmp_path / "init.ckpt"
        save_checkpoint(ckpt, cfg, manifest.schema, state_dict(EigenformerModel(cfg, manifest.schema)))
        out = tmp_path / "ins"
        assert main(["inspect", "--checkpoint", str(ckpt), "--data", GEN, "--graph", "2",
                     "--cache", cached, "--out", str(out)]) == 0
        phi = list(csv.reader(open(out / "phi.csv")))[1:]
        assert phi and all(float(v) == 0.0 for row in phi for v in row[3:])
        att = list(csv.reader(open(out / "attention_layer0.csv")))[1:]
        assert len(att) == 8  # shared mode: one map per layer
        assert all(float(v) == 1.0 / 8 for row in att for v in row[2:])
        prof = list(csv.reader(open(out / "sigma_profile.csv")))
        assert prof[0][0] == "rank" and len(prof) > 1

    def test_graph_out_of_range(self, tmp_path, trained):
        rc = main(["inspect", "--checkpoint", str(trained / "best.ckpt"), "--data", GEN,
                   "--graph", "8", "--out", str(tmp_path / "x")])
        assert rc == 2


class TestUsageAndSelfcheck:
    @pytest.mark.parametrize("argv", [[], ["frobnicate"], ["train"], ["precompute", "--input", "x"],
                                      ["precompute", "--input", GEN, "--output", "o", "--workers", "0"]])
    def test_usage_errors(self, argv):
        assert main(argv) == 1

    def test_missing_checkpoint(self, tmp_path):
        assert main(["eval", "--checkpoint", str(tmp_path / "nope"), "--data", GEN]) == 2

    def test_selfcheck_hooks(self, capsys):
        assert main(["selfcheck", "--inject-sigma-perturbation", "1e-6"]) == 3
        assert "FAIL sigma-bounds" in capsys.readouterr().out


class TestEndToEnd:
    def test_zinc_like_config_lr_follows_schedule(self, tmp_path):
        from eigenformer.config import PRESETS
        from eigenformer.training import LRSchedule, lr_at
        cfg = {**PRESETS["zinc"].to_dict(), "max_epochs": 6, "warmup_epochs": 2, "batch_size": 4, "edge_dim": None}
        path = tmp_path / "zinc.json"
        path.write_text(json.dumps(cfg))
        spec = "gen:er:count=8,n=6,n_max=9,p=0.4,target=regression,seed=3"
        assert main(["train", "--config", str(path), "--data", spec, "--out", str(tmp_path / "r")]) == 0
        log = [json.loads(line) for line in (tmp_path / "r" / "log.jsonl").read_text().splitlines()]
        sched = LRSchedule(1e-3, 2, 6, 2)
        assert [rec["lr"] for rec in log] == [lr_at(sched, 2 * e + 1) for e in range(6)]

    def test_memorized_train_set_scores_perfectly(self, tmp_path):
        spec = "gen:sbm:count=16,n=10,reveal=0.5,seed=6"  # every graph reveals a block
        cfg = _config(tmp_path, layers=2, heads=4, hidden_dim=32, phi_hidden_dim=16, batch_size=4,
                      lr=3e-3, max_epochs=300, warmup_epochs=10, attention_dropout=0.0)
        run = tmp_path / "r"
        assert main(["train", "--config", cfg, "--data", spec, "--out", str(run)]) == 0
        assert main(["eval", "--checkpoint", str(run / "best.ckpt"), "--data", spec]) == 0
        assert json.loads((run / "eval_metrics.json").read_text())["accuracy"] >= 0.95
