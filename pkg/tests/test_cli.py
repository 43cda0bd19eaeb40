import json

import pytest

from dnsverdict import corpus, probe, simnet
from dnsverdict.cli import main
from dnsverdict.corpus import DnsResponse


def fixture_args(d):
    return ["--snapshot", str(d / "snapshot.jsonl"), "--metadata", str(d / "metadata.jsonl"),
            "--roots", str(d / "roots.pem"), "--fingerprints", str(d / "fingerprints.jsonl")]


@pytest.fixture(scope="module")
def fixture_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("fx")
    assert main(["simulate", "--spec", "mixed", "--out", str(d)]) == 0
    return d


def test_simulate_writes_files_and_is_repeatable(fixture_dir, tmp_path):
    names = {p.name for p in fixture_dir.iterdir()}
    assert names == set(simnet.FIXTURE_FILES) | {"manifest.json"}
    assert main(["simulate", "--spec", "mixed", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "manifest.json").read_bytes() == (fixture_dir / "manifest.json").read_bytes()


def test_simulate_spec_file_and_bad_spec(tmp_path):
    spec = tmp_path / "s.spec"
    spec.write_text("seed = 5\ndomains = 12\nresolvers = 4\n")
    assert main(["simulate", "--spec", str(spec), "--out", str(tmp_path / "o")]) == 0
    spec.write_text("domains = 0\n")
    assert main(["simulate", "--spec", str(spec), "--out", str(tmp_path / "o2")]) == 2
    assert main(["simulate", "--spec", str(tmp_path / "missing.spec"), "--out", str(tmp_path / "o3")]) == 2


def test_classify_matches_truth_and_replay(fixture_dir, tmp_path):
    out1, out2, arch = tmp_path / "c1", tmp_path / "c2", tmp_path / "f"
    args = fixture_args(fixture_dir)
    assert main(["classify", "--mode", "simulated", "--spec", "mixed", *args, "--out", str(out1)]) == 0
    truth = simnet.load_truth(fixture_dir / "truth.jsonl")
    records = list(corpus.iter_jsonl(out1 / "verdicts.jsonl"))
    assert records
    for rec in records:
        assert rec["label"] == truth[(rec["resolver_ip"], rec["domain"])].label.value
    summary = json.loads((out1 / "summary.json").read_text())
    assert sum(summary["by_label"].values()) == len(records)
    assert summary["exclusions"] == {"SAME_IP_SET": 5}

    assert main(["fetch", "--mode", "simulated", "--spec", "mixed", *args, "--out", str(arch)]) == 0
    assert main(["classify", "--mode", "replay", "--archive", str(arch / "fetches.jsonl"), *args,
                 "--out", str(out2)]) == 0
    assert (out1 / "verdicts.jsonl").read_bytes() == (out2 / "verdicts.jsonl").read_bytes()
    assert (out1 / "summary.json").read_bytes() == (out2 / "summary.json").read_bytes()

    assert main(["report", "--verdicts", str(out1 / "verdicts.jsonl"), "--snapshot", str(fixture_dir / "snapshot.jsonl"),
                 "--out", str(tmp_path / "r")]) == 0
    report = json.loads((tmp_path / "r" / "report.json").read_text())
    assert report["by_label"] == summary["by_label"] and report["by_country"] == summary["by_country"]


def test_all_private_resolver_counted(fixture_dir, tmp_path):
    snap = corpus.parse_snapshot(open(fixture_dir / "snapshot.jsonl", "rb"))
    domains = sorted({r.domain for r in snap})[:5]
    snap += [DnsResponse("62.9.9.53", "ZZ", d, 0, (f"10.0.0.{i}",), None, 0, False) for i, d in enumerate(domains)]
    path = tmp_path / "snap.jsonl"
    with open(path, "w") as fh:
        corpus.write_snapshot(snap, fh)
    args = fixture_args(fixture_dir)
    args[1] = str(path)
    assert main(["classify", "--mode", "simulated", "--spec", "mixed", *args, "--out", str(tmp_path / "o")]) == 0
    summary = json.loads((tmp_path / "o" / "summary.json").read_text())
    assert summary["exclusions"]["ALL_PRIVATE"] >= 1


def test_exit_codes(fixture_dir, tmp_path):
    args = fixture_args(fixture_dir)
    assert main(["classify", "--mode", "live", *args, "--out", str(tmp_path / "l")]) == 2
    assert main(["classify", "--mode", "replay", *args, "--out", str(tmp_path / "r")]) == 2  # no archive
    assert main(["classify", "--mode", "replay", "--snapshot", str(tmp_path / "nope.jsonl"),
                 "--archive", "x", "--out", str(tmp_path / "m")]) == 2
    garbage = tmp_path / "garbage.jsonl"
    garbage.write_text("not json\n" * 10)
    bad = list(args)
    bad[1] = str(garbage)
    assert main(["classify", "--mode", "simulated", *bad, "--out", str(tmp_path / "g")]) == 1
    assert main(["compare", "--mode", "simulated", "--theta", "0", "--out", str(tmp_path / "t")]) == 2


def test_stage_failure_names_stage(fixture_dir, tmp_path, capsys):
    garbage = tmp_path / "garbage.jsonl"
    garbage.write_text("{}\n" * 10)
    assert main(["classify", "--mode", "simulated", "--snapshot", str(garbage), "--out", str(tmp_path / "g")]) == 1
    assert "stage 'parse'" in capsys.readouterr().err


@pytest.mark.parametrize("preset,check", [
    ("localization", lambda r: r["false_positive"]["rate"] > 0.5),
    ("cdn_blockpage", lambda r: r["false_negative"]["count"] > 0),
    ("clean", lambda r: r["false_positive"]["count"] == 0 and r["false_negative"]["count"] == 0),
])
def test_compare_presets(preset, check, tmp_path):
    assert main(["compare", "--mode", "simulated", "--spec", preset, "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "comparison.json").read_text())
    assert check(rep)
    sweep = json.loads((tmp_path / "theta_sweep.json").read_text())
    assert [row["theta"] for row in sweep] == list(range(1, 11))
    flagged = [row["flagged_pairs"] for row in sweep]
    assert flagged == sorted(flagged, reverse=True)


def test_cluster_command(tmp_path):
    pages = []
    for i in range(12):
        body = f"<html><head><title>Blocked by order</title></head><body><p>case {i:02d} - access restricted</p></body></html>"
        pages.append(probe.FetchResult(corpus.ResolutionPair(f"d{i}.example", "5.5.5.5"),
                                       probe.HttpPage(200, (), body.encode())))
    for i in range(3):
        pages.append(probe.FetchResult(corpus.ResolutionPair(f"x{i}.example", "6.6.6.6"),
                                       probe.HttpPage(200, (), b"<div>odd one</div>" * (i + 1) * 10)))
    arch = tmp_path / "a.jsonl"
    with open(arch, "w") as fh:
        probe.write_archive(pages, fh)
    assert main(["cluster", "--archive", str(arch), "--out", str(tmp_path / "o")]) == 0
    report = json.loads((tmp_path / "o" / "clusters.json").read_text())
    assert [c["size"] for c in report["clusters"]] == [12] and report["dropped_pages"] == 3
    drafts = list(corpus.iter_jsonl(tmp_path / "o" / "draft_fingerprints.jsonl"))
    assert len(drafts) == 1 and "Blocked by order" in drafts[0]["pattern"]

    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    assert main(["cluster", "--archive", str(empty), "--out", str(tmp_path / "e")]) == 0
    assert json.loads((tmp_path / "e" / "clusters.json").read_text())["clusters"] == []
    assert main(["cluster", "--archive", str(tmp_path / "missing"), "--out", str(tmp_path / "m")]) == 2
