"""Acceptance suite: one test per release criterion, each printing a
PASS line so the run log doubles as the acceptance report."""

import functools
import json
import math
import os
import threading
import time
import urllib.error
import urllib.request

import numpy as np
import pytest
from conftest import organ_phantom, speckle_phantom
from test_fr import naive_structural_distance
from test_nr import naive_log_density, random_gmm
from test_stats import (
    oracle_kendall,
    oracle_kendall_w,
    oracle_spearman,
)

from usqm.cli import main as cli_main
from usqm.degrade import (
    DEFAULT_KINDS,
    DegradationSpec,
    PsnrTarget,
    apply,
    calibrate_to_psnr,
    severity_sweep,
    theta_bounds,
)
from usqm.fr import FrConfig, gram_distance, structural_distance, token_loss, ulpips
from usqm.image import psnr, save_png
from usqm.nr import (
    NrqConfig,
    aggregate_worst,
    fit_bank,
    fit_gmm,
    fit_pca,
    log_density,
    nrq_score,
    worst_kappa,
)
from usqm.stats import (
    binomial_test_two_sided,
    kendall_tau,
    kendall_w,
    run_protocol,
    spearman,
    wilson_ci,
)
from usqm.study import analyze_agreement, create_server, pairgen, write_pairs


def criterion(name):
    def decorate(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            try:
                fn(*args, **kwargs)
            except BaseException:
                print(f"ACCEPTANCE FAIL: {name}")
                raise
            print(f"ACCEPTANCE PASS: {name}")

        return wrapper

    return decorate


@criterion("metric identities and symmetry (50 phantoms, <1 min)")
def test_metric_identities(encoder):
    cfg = FrConfig()
    start = time.monotonic()
    for i in range(50):
        x = speckle_phantom(1000 + i, grain=1.0 + (i % 5), smooth=8.0 + (i % 7) * 3)
        assert ulpips(x, x, cfg, encoder).final <= 1e-12
        assert token_loss(x, x, cfg, encoder) <= 1e-12
    for i in range(10):
        x = speckle_phantom(2000 + i)
        y = speckle_phantom(3000 + i)
        assert abs(ulpips(x, y, cfg, encoder).final - ulpips(y, x, cfg, encoder).final) <= 1e-12
        assert abs(token_loss(x, y, cfg, encoder) - token_loss(y, x, cfg, encoder)) <= 1e-12
    elapsed = time.monotonic() - start
    assert elapsed < 60, f"identity suite took {elapsed:.1f}s"


@criterion("structural distance matches the materialize-everything oracle (200 cases)")
def test_structural_oracle():
    rng = np.random.default_rng(4242)
    for _ in range(200):
        Fx = rng.standard_normal((9, 2))
        Fy = rng.standard_normal((9, 2))
        r = int(rng.integers(0, 4))
        tau = float(rng.uniform(1.0, 40.0))
        fast = structural_distance(Fx, Fy, 3, radius=r, temperature=tau)
        slow = naive_structural_distance(Fx, Fy, 3, r, tau)
        assert abs(fast - slow) <= 1e-10


@criterion("one-token one-hot Gram distance is exactly 0.25")
def test_gram_example():
    assert gram_distance(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])) == 0.25


@criterion("mixture log-density oracle, EM monotonicity, single-component closed form")
def test_gmm_correctness():
    rng = np.random.default_rng(5555)
    for _ in range(100):
        k = int(rng.integers(1, 5))
        d = int(rng.integers(1, 9))
        gmm = random_gmm(rng, k, d)
        v = rng.standard_normal(d) * 2
        assert abs(log_density(gmm, v) - naive_log_density(gmm, v)) <= 1e-8
    for trial in range(5):
        X = np.concatenate(
            [
                rng.standard_normal((40, 3)) + rng.standard_normal(3) * 4,
                rng.standard_normal((40, 3)),
            ]
        )
        gmm = fit_gmm(X, int(rng.integers(1, 5)), seed=trial)
        trace = np.array(gmm.loglik_trace)
        assert np.all(np.diff(trace) >= -1e-9)
    X = rng.standard_normal((80, 4)) * [0.5, 1.0, 2.0, 3.0] + [1, 2, 3, 4]
    single = fit_gmm(X, 1, seed=0)
    assert np.allclose(single.means[0], X.mean(axis=0), atol=1e-9)
    assert np.allclose(single.variances[0], np.maximum(X.var(axis=0), 1e-6), atol=1e-9)
    assert abs(single.weights[0] - 1.0) <= 1e-12


@criterion("PCA reconstruction, diagonality, and variance ordering")
def test_pca_criteria():
    rng = np.random.default_rng(6666)
    X = rng.standard_normal((60, 7)) * np.linspace(4, 0.2, 7)
    full = fit_pca(X, 7)
    np.testing.assert_allclose(full.back_project(full.project(X)), X, atol=1e-8)
    partial = fit_pca(X, 4)
    proj = partial.project(X)
    cov = np.cov(proj, rowvar=False)
    np.testing.assert_allclose(cov - np.diag(np.diag(cov)), 0.0, atol=1e-6)
    np.testing.assert_allclose(proj.var(axis=0, ddof=1), partial.variances, rtol=1e-6)
    assert np.all(np.diff(partial.variances) <= 1e-12)


@criterion("worst-region count formula and sort-oracle aggregation")
def test_worst_region():
    for n in range(1, 101):
        assert worst_kappa(n) == max(1, math.floor(0.15 * n + 0.5))
    rng = np.random.default_rng(7777)
    for _ in range(500):
        n = int(rng.integers(1, 60))
        scores = np.round(rng.standard_normal(n), 2)  # rounding forces ties
        kappa = worst_kappa(n)
        _, final = aggregate_worst(scores, kappa)
        assert final == float(np.mean(np.sort(scores)[:kappa]))


@criterion("PSNR calibration hits 20/22/25 dB for all 8 kinds; sweeps monotone (<2 min)")
def test_degradation_calibration():
    start = time.monotonic()
    phantom = speckle_phantom(77)
    for kind in DEFAULT_KINDS:
        for target in (20.0, 22.0, 25.0):
            result = calibrate_to_psnr(phantom, kind, seed=11, target=PsnrTarget(target))
            assert result.converged, f"{kind}@{target}: no convergence"
            assert abs(result.achieved_psnr - target) <= 0.1, (
                f"{kind}@{target}: achieved {result.achieved_psnr:.3f}"
            )
            assert result.iterations <= 48
        variants = severity_sweep(phantom, kind, seed=11, n=6)
        psnrs = [psnr(phantom, img) for _, img in variants]
        assert all(b <= a + 1e-9 for a, b in zip(psnrs, psnrs[1:]))
    elapsed = time.monotonic() - start
    assert elapsed < 120, f"calibration suite took {elapsed:.1f}s"


@criterion("rank statistics match brute-force oracles; reported CI and p-value reproduced")
def test_rank_statistics():
    rng = np.random.default_rng(8888)
    done = 0
    while done < 1000:
        n = int(rng.integers(2, 9))
        a = rng.integers(0, 6, n).astype(float)
        b = rng.integers(0, 6, n).astype(float)
        if np.all(a == a[0]) or np.all(b == b[0]):
            continue
        assert spearman(a, b) == pytest.approx(oracle_spearman(a, b), abs=1e-12)
        assert kendall_tau(a, b) == pytest.approx(oracle_kendall(a, b), abs=1e-12)
        m = int(rng.integers(2, 5))
        rankings = rng.integers(0, 5, (m, n)).astype(float)
        try:
            w = kendall_w(rankings)
            assert w == pytest.approx(oracle_kendall_w(rankings.tolist()), abs=1e-12)
        except Exception:
            pass  # fully-tied draws are undefined by contract
        done += 1
    lo, hi = wilson_ci(393, 540, 0.95)
    assert abs(lo - 0.689) <= 0.001 and abs(hi - 0.764) <= 0.001
    assert binomial_test_two_sided(393, 540, 0.5) < 1e-20


NRQ_CFG = NrqConfig(pca_dim=32, components=4, seed=2024)


@criterion("2-organ bank separates clean from maximally degraded for >=7 of 8 kinds (<5 min)")
def test_nrq_end_to_end(encoder):
    start = time.monotonic()
    entries = []
    for organ in ("fine", "coarse"):
        for i in range(12):
            entries.append((organ_phantom(organ, 4000 + i, h=336, w=336), organ))
    bank, report = fit_bank(entries, encoder, NRQ_CFG)
    assert set(bank.organ_names) == {"fine", "coarse"}
    for organ in bank.organ_names:  # EM guarantee holds on the corpus fits too
        trace = np.array(bank.organs[organ].loglik_trace)
        assert np.all(np.diff(trace) >= -1e-9)

    held_out = [
        (organ, organ_phantom(organ, 5000 + i, h=336, w=336))
        for organ in ("fine", "coarse")
        for i in range(3)
    ]
    kinds_separated = 0
    details = []
    for kind in DEFAULT_KINDS:
        _, theta_max = theta_bounds(kind)
        clean_scores, degraded_scores = [], []
        for organ, img in held_out:
            clean_scores.append(nrq_score(img, bank, organ, encoder).final)
            damaged = apply(img, DegradationSpec(kind=kind, theta=theta_max, seed=5))
            degraded_scores.append(nrq_score(damaged, bank, organ, encoder).final)
        sep = float(np.mean(clean_scores) - np.mean(degraded_scores))
        details.append(f"{kind}: {sep:+.2f}")
        kinds_separated += int(sep > 0)
    assert kinds_separated >= 7, f"only {kinds_separated}/8 kinds separated ({details})"
    elapsed = time.monotonic() - start
    assert elapsed < 300, f"NRQ end-to-end took {elapsed:.1f}s"


@criterion("CLI commands are byte-deterministic across repeated runs")
def test_cli_determinism(tmp_path):
    root = tmp_path
    img_path = str(root / "phantom.png")
    save_png(speckle_phantom(123), img_path)

    def run(argv):
        assert cli_main(argv) == 0

    # degraded image bytes
    outs = []
    for tag in ("r1", "r2"):
        out = str(root / f"deg-{tag}.png")
        run(
            [
                "degrade", img_path, "--kind", "scanline-missing", "--theta", "0.2",
                "--seed", "6", "--out", out,
            ]
        )
        outs.append(open(out, "rb").read())
    assert outs[0] == outs[1]

    # bank bytes
    manifest = root / "manifest.jsonl"
    with open(manifest, "w") as fh:
        for i in range(6):
            name = f"clean{i}.png"
            save_png(organ_phantom("fine", 300 + i), str(root / name))
            fh.write(json.dumps({"path": name, "organ": "fine"}) + "\n")
    banks = []
    for tag in ("b1", "b2"):
        bank_path = str(root / f"bank-{tag}.usqb")
        run(
            [
                "nrq-fit", str(manifest), bank_path,
                "--pca-dim", "4", "--components", "2", "--seed", "5",
            ]
        )
        banks.append(open(bank_path, "rb").read())
    assert banks[0] == banks[1]

    # score JSONL bytes
    score_files = []
    for tag in ("s1", "s2"):
        out = str(root / f"scores-{tag}.jsonl")
        run(["nrq-score", str(root / "bank-b1.usqb"), str(root / "clean0.png"), "--out", out])
        score_files.append(open(out, "rb").read())
    assert score_files[0] == score_files[1]

    # report bytes
    csv_path = root / "nr.csv"
    lines = ["image_id,organ,distortion,severity_rank,nrq"]
    for rank in range(1, 5):
        lines.append(f"i{rank},o,k,{rank},{-float(rank)}")
    csv_path.write_text("\n".join(lines) + "\n")
    reports = []
    for tag in ("e1", "e2"):
        out_dir = str(root / f"edir-{tag}")
        run(["eval", "nr-monotonicity", "--csv", str(csv_path), "--out-dir", out_dir])
        reports.append(open(os.path.join(out_dir, "nr-monotonicity.json"), "rb").read())
    assert reports[0] == reports[1]

    # pair manifest bytes
    deg_manifest = str(root / "degradations.json")
    for kind in ("speckle", "roi-shadow"):
        run(
            [
                "degrade", img_path, "--kind", kind, "--target-psnr", "21",
                "--seed", "2", "--out", str(root / f"pm-{kind}.png"),
                "--manifest", deg_manifest,
            ]
        )
    pair_files = []
    for tag in ("g1", "g2"):
        out = str(root / f"pairs-{tag}.json")
        run(
            [
                "study", "pairgen", deg_manifest, "--n-pairs", "1",
                "--seed", "3", "--duplicates", "0", "--out", out,
            ]
        )
        pair_files.append(open(out, "rb").read())
    assert pair_files[0] == pair_files[1]


@criterion("protocol drivers return exact +/-1 correlations and W in {1, 0} on planted data")
def test_protocol_oracles(tmp_path):
    import csv as csvmod

    def write_csv(path, header, rows):
        with open(path, "w", newline="") as fh:
            w = csvmod.writer(fh)
            w.writerow(header)
            w.writerows(rows)

    # perfect and inverted monotonicity
    for sign, expected_rho in ((-1.0, -1.0), (1.0, 1.0)):
        path = str(tmp_path / f"nr{sign}.csv")
        rows = [
            (f"i{r}", "o", "k", r, sign * float(r)) for r in range(1, 7)
        ]
        write_csv(path, ["image_id", "organ", "distortion", "severity_rank", "nrq"], rows)
        report = run_protocol("nr-monotonicity", {"csv": path})
        assert report.per_condition[0]["spearman_rho"] == expected_rho
        assert report.aggregate["mean_agreement"] == -expected_rho

    # planted task-anchor: metric equals damage (rho = tau = 1)
    path = str(tmp_path / "anchor.csv")
    rows = [(f"i{i}", "k", 0.1 * i, float(i), float(i)) for i in range(6)]
    write_csv(path, ["image_id", "distortion", "theta", "metric_value", "anchor_damage"], rows)
    report = run_protocol("task-anchor", {"csvs": [path]})
    assert report.aggregate["mean_spearman_rho"] == 1.0
    assert report.aggregate["mean_kendall_tau"] == 1.0

    # shared ordering -> W = 1; two reversed organs -> W = 0
    path = str(tmp_path / "cross1.csv")
    rows = [
        (f"i{i}", organ, f"k{i}", 1, float(i))
        for organ in ("a", "b", "c")
        for i in range(4)
    ]
    write_csv(path, ["image_id", "organ", "distortion", "severity_rank", "nrq"], rows)
    assert run_protocol("cross-organ", {"csv": path}).aggregate["kendall_w"] == 1.0

    path = str(tmp_path / "cross0.csv")
    rows = [(f"i{i}", "a", f"k{i}", 1, float(i)) for i in range(4)]
    rows += [(f"i{i}", "b", f"k{i}", 1, float(3 - i)) for i in range(4)]
    write_csv(path, ["image_id", "organ", "distortion", "severity_rank", "nrq"], rows)
    assert run_protocol("cross-organ", {"csv": path}).aggregate["kendall_w"] == 0.0


@criterion("[secondary] blinded study flow: pairgen, headless serve, restart, analyze")
def test_study_flow(tmp_path):
    root = tmp_path
    rows = []
    for i in range(4):
        img = speckle_phantom(600 + i)
        for kind in ("additive-gaussian", "scanline-missing"):
            for target in (20.0, 25.0):
                result = calibrate_to_psnr(img, kind, seed=i, target=PsnrTarget(target))
                name = f"s{i}_{kind}_{int(target)}.png"
                save_png(result.image, str(root / name))
                rows.append(
                    {
                        "source": f"s{i}.png",
                        "kind": kind,
                        "theta": result.theta,
                        "seed": i,
                        "achieved_psnr": result.achieved_psnr,
                        "output_path": name,
                    }
                )
    from usqm.store import write_degradation_manifest

    manifest_path = str(root / "degradations.json")
    write_degradation_manifest(manifest_path, rows)

    pairs = pairgen(manifest_path, n_pairs=6, sanity_fraction=0.5, seed=12, duplicates=1)
    for p in pairs["pairs"]:
        if p["class"] == "cross":
            assert p["left"]["source"] == p["right"]["source"]
            assert p["left"]["kind"] != p["right"]["kind"]
            assert abs(p["left"]["psnr"] - p["right"]["psnr"]) <= 0.1
    pairs_path = str(root / "pairs.json")
    write_pairs(pairs, pairs_path)
    responses_path = str(root / "responses.jsonl")

    server, state = create_server(pairs_path, responses_path, port=0, images_root=str(root))
    threading.Thread(target=server.serve_forever, daemon=True).start()
    base = f"http://127.0.0.1:{server.server_address[1]}"

    def get(url):
        with urllib.request.urlopen(url) as resp:
            return resp.status, resp.read()

    def post(payload):
        req = urllib.request.Request(
            f"{base}/api/choice", data=json.dumps(payload).encode(), method="POST"
        )
        try:
            with urllib.request.urlopen(req) as resp:
                return resp.status
        except urllib.error.HTTPError as exc:
            return exc.code

    scores = {}
    for p in pairs["pairs"]:
        for side in ("left", "right"):
            ref = p[side]
            scores[ref["path"]] = 2.0 if ref["kind"] == "scanline-missing" else 1.0

    forbidden = ("gaussian", "scanline", "kind", "theta", "psnr", ".png")
    answered = 0
    restarted = False
    while True:
        status, body = get(f"{base}/api/next?reader=clinician")
        assert status == 200
        payload = json.loads(body)
        if payload.get("done"):
            break
        text = body.decode().lower()
        for needle in forbidden:
            assert needle not in text, f"blinding violated by {needle!r}"
        pair = next(p for p in pairs["pairs"] if p["pair_id"] == payload["pair_id"])
        if pair["class"] == "sanity":
            choice = pair["correct"]
        else:
            choice = "A" if scores[pair["left"]["path"]] >= scores[pair["right"]["path"]] else "B"
        assert post({"pair_id": payload["pair_id"], "reader": "clinician", "choice": choice}) == 200
        assert post({"pair_id": payload["pair_id"], "reader": "clinician", "choice": choice}) == 409
        answered += 1
        if answered == 3 and not restarted:  # kill-and-restart mid-study
            server.shutdown()
            server.server_close()
            state.close()
            server, state = create_server(
                pairs_path, responses_path, port=0, images_root=str(root)
            )
            threading.Thread(target=server.serve_forever, daemon=True).start()
            base = f"http://127.0.0.1:{server.server_address[1]}"
            restarted = True
    assert answered == len(pairs["pairs"])
    server.shutdown()
    server.server_close()
    state.close()

    from usqm.store import read_jsonl

    log_rows = read_jsonl(responses_path)
    assert len(log_rows) == len(pairs["pairs"])  # exactly one response per pair

    nrq_path = str(root / "nrq.jsonl")
    with open(nrq_path, "w") as fh:
        for path, score in scores.items():
            fh.write(json.dumps({"path": path, "final": score}) + "\n")
    report = analyze_agreement(responses_path, pairs_path, nrq_path)
    assert report["accuracy"] == 1.0
    assert report["n"] == 6  # sanity rows excluded from the headline number
    per_class = {c["class"]: c for c in report["per_class"]}
    assert per_class["sanity"]["accuracy"] == 1.0
    assert per_class["duplicate"]["consistency"] == 1.0
