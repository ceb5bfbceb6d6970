"""CLI tests: full pipeline runs, determinism, config precedence, errors."""

import json

import numpy as np
import pytest

from patchseek.cli import main
from patchseek.embed import ImageRecord, PatchEntry, normalize
from patchseek.geometry import NormRect
from patchseek.index import build_flat
from patchseek.quantize import Codebook, PQParams, build_ivfpq
from patchseek.storage import read_embeddings, write_index

FULL = NormRect(0.0, 0.0, 1.0, 1.0)


def run(*argv):
    return main([str(a) for a in argv])


def synth_args(tmp_path, **over):
    args = {
        "out-db": tmp_path / "db.pwr",
        "out-queries": tmp_path / "q.pwr",
        "out-gt": tmp_path / "gt.jsonl",
        "queries": 2,
        "images-per-query": 6,
        "positives": 2,
        "seed": 5,
    }
    args.update(over)
    argv = ["synth"]
    for key, value in args.items():
        argv += [f"--{key}", value]
    return argv


def test_pipeline_flat_end_to_end(tmp_path, capsys):
    assert run(*synth_args(tmp_path)) == 0
    summary = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert summary["images"] == 12 and summary["entries_per_image"] == 30

    index = tmp_path / "flat.pwix"
    assert run("build", "--embeddings", tmp_path / "db.pwr", "--out", index) == 0
    summary = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert summary == {
        "command": "build", "kind": "flat", "images": 12, "rows": 360, "dim": 64,
    }

    results = tmp_path / "res.jsonl"
    assert run("search", "--index", index, "--queries", tmp_path / "q.pwr",
               "--k", "5", "--out", results) == 0
    lines = results.read_text().splitlines()
    assert len(lines) == 2
    assert all(len(json.loads(line)["hits"]) == 5 for line in lines)

    assert run("eval", "--results", results, "--gt", tmp_path / "gt.jsonl") == 0
    report = json.loads(capsys.readouterr().out)
    assert report["n_queries"] == 2
    assert report["map"] == 1.0
    assert set(report["loc_ap_at"]) == {"0.3", "0.4", "0.5"}
    # aggregates must equal recomputation from the per-query records
    assert report["map"] == pytest.approx(
        sum(q["ap"] for q in report["per_query"]) / 2
    )
    assert report["loc_ap"] == pytest.approx(
        sum(q["loc_ap"] for q in report["per_query"]) / 2
    )

    assert run("stats", "--index", index) == 0
    stats = json.loads(capsys.readouterr().out)
    assert stats["ratio"] == 1.0 and stats["vector_count"] == 360


def test_search_stdout_and_k1(tmp_path, capsys):
    run(*synth_args(tmp_path))
    run("build", "--embeddings", tmp_path / "db.pwr", "--out", tmp_path / "i.pwix")
    capsys.readouterr()
    assert run("search", "--index", tmp_path / "i.pwix", "--queries",
               tmp_path / "q.pwr", "--k", "1") == 0
    out = capsys.readouterr().out
    for line in out.splitlines():
        doc = json.loads(line)
        assert len(doc["hits"]) == 1
        assert doc["hits"][0]["rank"] == 1


def test_synth_rerun_byte_identical(tmp_path):
    run(*synth_args(tmp_path))
    first = [(tmp_path / n).read_bytes() for n in ("db.pwr", "q.pwr", "gt.jsonl")]
    run(*synth_args(tmp_path))
    second = [(tmp_path / n).read_bytes() for n in ("db.pwr", "q.pwr", "gt.jsonl")]
    assert first == second


@pytest.mark.parametrize("level,count", [("l0", 1), ("l1", 5), ("l2", 14), ("l3", 30)])
def test_synth_level_entry_counts(tmp_path, level, count):
    run(*synth_args(tmp_path, **{"level": level, "queries": 1, "images-per-query": 2}))
    records = read_embeddings(tmp_path / "db.pwr")
    assert all(len(r.entries) == count for r in records)


def test_synth_sliding_strategy(tmp_path):
    run(*synth_args(tmp_path, **{"strategy": "sliding", "level": "l1", "stride": "0.5",
                                 "queries": 1, "images-per-query": 2}))
    records = read_embeddings(tmp_path / "db.pwr")
    assert all(len(r.entries) == 10 for r in records)  # global + 3x3 windows


def test_synth_external_strategy(tmp_path):
    run(*synth_args(tmp_path, **{"strategy": "external", "proposals": 4,
                                 "queries": 1, "images-per-query": 4, "positives": 2}))
    records = read_embeddings(tmp_path / "db.pwr")
    # global patch + proposals, plus the planted box on positive images
    assert {len(r.entries) for r in records} <= {5, 6}
    assert sum(len(r.entries) == 6 for r in records) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_pipeline_ivfpq_and_gt_pool(tmp_path, capsys):
    run(*synth_args(tmp_path))
    index = tmp_path / "ivf.pwix"
    assert run("build", "--embeddings", tmp_path / "db.pwr", "--out", index,
               "--kind", "ivfpq", "--pq", "16,4", "--nprobe", "4", "--seed", "3") == 0
    summary = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert summary["kind"] == "ivfpq"
    assert summary["pool"] == "l3" and summary["pool_size"] == 360

    results = tmp_path / "res.jsonl"
    assert run("search", "--index", index, "--queries", tmp_path / "q.pwr",
               "--k", "6", "--nprobe", "4", "--out", results) == 0
    assert run("eval", "--results", results, "--gt", tmp_path / "gt.jsonl") == 0
    report = json.loads(capsys.readouterr().out)
    assert report["map"] > 0.5

    assert run("stats", "--index", index) == 0
    stats = json.loads(capsys.readouterr().out)
    assert stats["ratio"] > 1.0
    assert stats["code_bytes"] == 360 * 16

    # the gt pool draws exactly one descriptor per annotated positive image
    assert run("build", "--embeddings", tmp_path / "db.pwr", "--out",
               tmp_path / "ivf_gt.pwix", "--kind", "ivfpq", "--pq", "16,4",
               "--pq-train-pool", "gt", "--gt", tmp_path / "gt.jsonl") == 0
    summary = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert summary["pool"] == "gt" and summary["pool_size"] == 4


def test_gt_pool_requires_gt_flag(tmp_path, capsys):
    run(*synth_args(tmp_path))
    capsys.readouterr()
    code = run("build", "--embeddings", tmp_path / "db.pwr", "--out",
               tmp_path / "x.pwix", "--kind", "ivfpq", "--pq-train-pool", "gt")
    assert code == 2
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "ValueError" and "--gt" in err["message"]


def test_cli_search_parity_flat_vs_full_probe_ivfpq(tmp_path, capsys):
    # with codebook-member vectors and nprobe = nlist the two index kinds
    # must emit identical result files through the command surface
    rng = np.random.default_rng(3)
    m, dsub, nlist = 4, 4, 5
    subs = rng.standard_normal((m, 256, dsub))
    subs /= np.linalg.norm(subs, axis=2, keepdims=True) * np.sqrt(m)
    coarse = rng.standard_normal((nlist, m * dsub))
    coarse /= np.linalg.norm(coarse, axis=1, keepdims=True)
    cb = Codebook(subs.astype(np.float32), coarse.astype(np.float32), seed=0)
    records = []
    for i in range(12):
        codes = rng.integers(0, 256, size=m)
        vec = np.concatenate([cb.sub_centroids[j][codes[j]] for j in range(m)])
        records.append(ImageRecord(f"im{i:02d}", 8, 8, [PatchEntry(0, FULL, vec)]))
    params = PQParams(m=m, nlist=nlist, nprobe=nlist)
    write_index(build_flat(records), tmp_path / "flat.pwix")
    write_index(build_ivfpq(records, cb, params), tmp_path / "ivf.pwix")
    queries = [ImageRecord("qq", 8, 8, [PatchEntry(0, FULL, normalize(rng.standard_normal(16)))])]
    from patchseek.storage import write_embeddings

    write_embeddings(queries, tmp_path / "q.pwr")
    run("search", "--index", tmp_path / "flat.pwix", "--queries", tmp_path / "q.pwr",
        "--k", "12", "--out", tmp_path / "a.jsonl")
    run("search", "--index", tmp_path / "ivf.pwix", "--queries", tmp_path / "q.pwr",
        "--k", "12", "--out", tmp_path / "b.jsonl")
    a = json.loads((tmp_path / "a.jsonl").read_text())
    b = json.loads((tmp_path / "b.jsonl").read_text())
    assert [h["image_id"] for h in a["hits"]] == [h["image_id"] for h in b["hits"]]
    assert [h["best_patch_id"] for h in a["hits"]] == [h["best_patch_id"] for h in b["hits"]]
    for ha, hb in zip(a["hits"], b["hits"]):
        assert abs(ha["score"] - hb["score"]) < 1e-5


def test_eval_slicing_flag(tmp_path, capsys):
    run(*synth_args(tmp_path))
    run("build", "--embeddings", tmp_path / "db.pwr", "--out", tmp_path / "i.pwix")
    run("search", "--index", tmp_path / "i.pwix", "--queries", tmp_path / "q.pwr",
        "--k", "6", "--out", tmp_path / "res.jsonl")
    capsys.readouterr()
    assert run("eval", "--results", tmp_path / "res.jsonl", "--gt", tmp_path / "gt.jsonl",
               "--slice", "center_distance", "--bins", "3") == 0
    report = json.loads(capsys.readouterr().out)
    assert report["slices"]["axis"] == "center_distance"
    assert 1 <= len(report["slices"]["bins"]) <= 3


def test_eval_rejects_duplicate_results(tmp_path, capsys):
    run(*synth_args(tmp_path))
    run("build", "--embeddings", tmp_path / "db.pwr", "--out", tmp_path / "i.pwix")
    run("search", "--index", tmp_path / "i.pwix", "--queries", tmp_path / "q.pwr",
        "--k", "2", "--out", tmp_path / "res.jsonl")
    doubled = (tmp_path / "res.jsonl").read_text() * 2
    (tmp_path / "res2.jsonl").write_text(doubled)
    capsys.readouterr()
    assert run("eval", "--results", tmp_path / "res2.jsonl", "--gt", tmp_path / "gt.jsonl") == 2
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert "duplicate query_id" in err["message"]


def test_nprobe_warning_on_flat(tmp_path, capsys):
    run(*synth_args(tmp_path))
    run("build", "--embeddings", tmp_path / "db.pwr", "--out", tmp_path / "i.pwix")
    capsys.readouterr()
    assert run("search", "--index", tmp_path / "i.pwix", "--queries", tmp_path / "q.pwr",
               "--nprobe", "3", "--out", tmp_path / "r.jsonl") == 0
    err = capsys.readouterr().err
    assert "ignored" in err


def test_config_file_precedence(tmp_path):
    conf = tmp_path / "conf.json"
    conf.write_text(json.dumps({"queries": 1, "images_per_query": 3, "seed": 9}))
    base = ["synth", "--config", conf,
            "--out-db", tmp_path / "a.pwr", "--out-queries", tmp_path / "aq.pwr",
            "--out-gt", tmp_path / "ag.jsonl"]
    assert run(*base) == 0
    records = read_embeddings(tmp_path / "a.pwr")
    assert len(records) == 3  # config value applied

    # an explicit flag beats the config file
    assert run(*base[:1], "--config", conf, "--images-per-query", "4",
               "--out-db", tmp_path / "b.pwr", "--out-queries", tmp_path / "bq.pwr",
               "--out-gt", tmp_path / "bg.jsonl") == 0
    assert len(read_embeddings(tmp_path / "b.pwr")) == 4


def test_config_rejects_unknown_keys(tmp_path, capsys):
    conf = tmp_path / "conf.json"
    conf.write_text(json.dumps({"not_a_flag": 1}))
    assert run(*synth_args(tmp_path, config=conf)) == 2
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert "unknown config key" in err["message"]
    conf.write_text("[1, 2]")
    assert run(*synth_args(tmp_path, config=conf)) == 2


def test_missing_input_is_clean_error(tmp_path, capsys):
    assert run("build", "--embeddings", tmp_path / "nope.pwr",
               "--out", tmp_path / "x.pwix") == 2
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "FileNotFoundError"


def test_synth_validation_errors(tmp_path, capsys):
    assert run(*synth_args(tmp_path, queries=0)) == 2
    assert run(*synth_args(tmp_path, **{"target-min": 40, "target-max": 20})) == 2
    errs = capsys.readouterr().err.strip().splitlines()
    assert all(json.loads(e)["error"] == "ValueError" for e in errs)
