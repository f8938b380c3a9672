"""Command-line entry point.

One binary with subcommands; stdout carries machine-parseable JSON and
diagnostics go to stderr. Exit codes are stable: 0 success, 2 I/O or
artifact decoding, 3 shape/config (including unknown organs and
fingerprint mismatches), 4 insufficient data, 5 unreachable PSNR target,
6 input schema violations.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

from . import degrade as degrade_mod
from . import stats, store, study
from .errors import (
    DecodeError,
    InsufficientDataError,
    SchemaError,
    StoreError,
    UnreachableTargetError,
    UsqmError,
)
from .features import DEFAULT_LAYERS, DEFAULT_SEED, BuiltinEncoder, ExternalFeatureExtractor
from .fr import FrConfig, token_loss, ulpips_tiled
from .image import load_image, psnr, save_png
from .nr import NrqConfig, fit_bank, nrq_score

EXIT_OK = 0
EXIT_IO = 2
EXIT_CONFIG = 3
EXIT_DATA = 4
EXIT_TARGET = 5
EXIT_SCHEMA = 6

_DEFAULTS = {
    "extractor": f"builtin-seeded:{DEFAULT_SEED}",
    "layers": list(DEFAULT_LAYERS),
    "radius": 3,
    "temperature": 20.0,
    "stride": 112,
    "tile_size": 224,
    "pca_dim": 128,
    "components": 4,
    "worst_fraction": 0.15,
    "seed": 0,
    "fingerprint_policy": "error",
}


def _resolve_config(args) -> dict:
    cfg = dict(_DEFAULTS)
    config_path = getattr(args, "config", None)
    if config_path:
        with open(config_path) as fh:
            try:
                file_cfg = json.load(fh)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{config_path}: invalid JSON ({exc})") from exc
        unknown = set(file_cfg) - set(cfg)
        if unknown:
            raise SchemaError(f"{config_path}: unknown config keys {sorted(unknown)}")
        cfg.update(file_cfg)
    env_seed = os.environ.get("USQM_SEED")
    if env_seed is not None and cfg["extractor"] == _DEFAULTS["extractor"]:
        cfg["extractor"] = f"builtin-seeded:{int(env_seed)}"
    for key in cfg:
        val = getattr(args, key.replace("-", "_"), None)
        if val is not None:
            cfg[key] = val
    if isinstance(cfg["layers"], str):
        cfg["layers"] = [int(x) for x in cfg["layers"].split(",") if x.strip()]
    cfg["layers"] = sorted(int(x) for x in cfg["layers"])
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def _build_extractor(spec: str):
    if spec.startswith("builtin-seeded:"):
        return BuiltinEncoder(seed=int(spec.split(":", 1)[1]))
    if spec == "builtin-seeded":
        return BuiltinEncoder()
    if spec.startswith("external:"):
        return ExternalFeatureExtractor(spec.split(":", 1)[1])
    raise UsqmError(
        f"bad extractor {spec!r}; use builtin-seeded:<seed> or external:<features-file>"
    )


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def _maybe_print_config(args, cfg: dict) -> bool:
    if getattr(args, "print_config", False):
        _emit({"config": cfg, "config_hash": config_hash(cfg)})
        return True
    return False


def cmd_fr_score(args) -> int:
    cfg = _resolve_config(args)
    if _maybe_print_config(args, cfg):
        return EXIT_OK
    extractor = _build_extractor(cfg["extractor"])
    fr_cfg = FrConfig(
        layers=tuple(cfg["layers"]),
        radius=cfg["radius"],
        temperature=cfg["temperature"],
        loss_stride=cfg["stride"],
    )
    ref = load_image(args.reference)
    test = load_image(args.test)
    breakdown, provenance = ulpips_tiled(ref, test, fr_cfg, extractor)
    out = breakdown.to_json_dict()
    provenance["config_hash"] = config_hash(cfg)
    provenance["extractor"] = cfg["extractor"]
    out["provenance"] = provenance
    if args.token_loss:
        out["token_loss"] = token_loss(test, ref, fr_cfg, extractor)
    _emit(out)
    return EXIT_OK


def _fit_entries(manifest_rows, base_dir):
    for row in manifest_rows:
        path = row["path"]
        if not os.path.isabs(path):
            path = os.path.join(base_dir, path)
        yield load_image(path), row["organ"], row["path"]


def cmd_nrq_fit(args) -> int:
    cfg = _resolve_config(args)
    if _maybe_print_config(args, cfg):
        return EXIT_OK
    extractor = _build_extractor(cfg["extractor"])
    nrq_cfg = NrqConfig(
        layers=tuple(cfg["layers"]),
        tile_size=cfg["tile_size"],
        stride=cfg["stride"],
        pca_dim=cfg["pca_dim"],
        components=cfg["components"],
        seed=cfg["seed"],
    )
    rows = store.read_fit_manifest(args.manifest)
    if not rows:
        raise InsufficientDataError(f"{args.manifest}: manifest is empty")
    base = os.path.dirname(os.path.abspath(args.manifest))
    bank, report = fit_bank(
        _fit_entries(rows, base),
        extractor,
        nrq_cfg,
        config_hash=config_hash(cfg),
        created_at=store.artifact_timestamp(),
    )
    store.save_bank(bank, args.out)
    _emit(
        {
            "bank": args.out,
            "organs": list(bank.organ_names),
            "total_patches": report.total_patches,
            "excluded": [{"organ": o, "reason": r} for o, r in report.excluded],
            "fit": [
                {
                    "organ": i.organ,
                    "patches": i.patch_count,
                    "em_iterations": i.em_iterations,
                    "final_loglik": i.final_loglik,
                }
                for i in report.organ_info
            ],
            "config_hash": config_hash(cfg),
        }
    )
    return EXIT_OK


def _score_one(path, bank, organ, extractor, cfg):
    img = load_image(path)
    result = nrq_score(
        img,
        bank,
        organ,
        extractor,
        worst_fraction=cfg["worst_fraction"],
        fingerprint_policy=cfg["fingerprint_policy"],
        image_id=path,
    )
    row = result.to_json_dict()
    row["path"] = path
    return row


def cmd_nrq_score(args) -> int:
    cfg = _resolve_config(args)
    if _maybe_print_config(args, cfg):
        return EXIT_OK
    extractor = _build_extractor(cfg["extractor"])
    bank = store.load_bank(args.bank)
    paths = []
    for inp in args.inputs:
        if os.path.isdir(inp):
            paths.extend(
                os.path.join(inp, name)
                for name in sorted(os.listdir(inp))
                if name.lower().endswith((".png", ".pgm"))
            )
        else:
            paths.append(inp)
    ch = config_hash(cfg)
    jobs = max(1, args.jobs)
    if jobs == 1:
        rows = [_score_one(p, bank, args.organ, extractor, cfg) for p in paths]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            rows = list(
                pool.map(lambda p: _score_one(p, bank, args.organ, extractor, cfg), paths)
            )
    sink = open(args.out, "w") if args.out else sys.stdout
    try:
        for row in rows:  # input order regardless of completion order
            row["config_hash"] = ch
            sink.write(json.dumps(row, sort_keys=True) + "\n")
    finally:
        if args.out:
            sink.close()
    return EXIT_OK


def cmd_degrade(args) -> int:
    cfg = _resolve_config(args)
    if _maybe_print_config(args, cfg):
        return EXIT_OK
    if (args.target_psnr is None) == (args.theta is None):
        raise UsqmError("give exactly one of --target-psnr or --theta")
    img = load_image(args.input)
    seed = args.seed
    if args.theta is not None:
        spec = degrade_mod.DegradationSpec(kind=args.kind, theta=args.theta, seed=seed)
        out_img = degrade_mod.apply(img, spec)
        achieved = psnr(img, out_img)
        theta = args.theta
        converged = True
    else:
        target = degrade_mod.PsnrTarget(target=args.target_psnr, tolerance=args.tolerance)
        result = degrade_mod.calibrate_to_psnr(img, args.kind, seed, target)
        out_img, theta, achieved, converged = (
            result.image,
            result.theta,
            result.achieved_psnr,
            result.converged,
        )
    save_png(out_img, args.out)
    row = {
        "source": args.input,
        "kind": args.kind,
        "theta": theta,
        "seed": seed,
        "achieved_psnr": achieved,
        "output_path": args.out,
        "config_hash": config_hash(cfg),
    }
    if not converged:
        row["converged"] = False
    if args.manifest:
        rows = (
            store.read_degradation_manifest(args.manifest)
            if os.path.exists(args.manifest)
            else []
        )
        rows.append(row)
        store.write_degradation_manifest(args.manifest, rows)
    _emit(row)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    if _maybe_print_config(args, cfg):
        return EXIT_OK
    if args.protocol == "task-anchor":
        if not args.csv:
            raise UsqmError("task-anchor needs at least one --csv")
        inputs = {"csvs": args.csv}
    elif args.protocol in ("cross-organ", "nr-monotonicity"):
        if len(args.csv) != 1:
            raise UsqmError(f"{args.protocol} takes exactly one --csv")
        inputs = {"csv": args.csv[0]}
    else:  # afc-agreement
        if not (args.responses and args.pairs and args.nrq):
            raise UsqmError("afc-agreement needs --responses, --pairs and --nrq")
        inputs = {"responses": args.responses, "pairs": args.pairs, "nrq": args.nrq}
    report = stats.run_protocol(args.protocol, inputs, cfg={"config_hash": config_hash(cfg)})
    os.makedirs(args.out_dir, exist_ok=True)
    json_path = os.path.join(args.out_dir, f"{args.protocol}.json")
    md_path = os.path.join(args.out_dir, f"{args.protocol}.md")
    store.write_json(json_path, report.to_json_dict())
    store.atomic_write_bytes(md_path, report.to_markdown().encode())
    _emit({"protocol": args.protocol, "aggregate": report.aggregate, "report": json_path})
    return EXIT_OK


def cmd_study(args) -> int:
    cfg = _resolve_config(args)
    if _maybe_print_config(args, cfg):
        return EXIT_OK
    if args.study_cmd == "pairgen":
        manifest = study.pairgen(
            args.manifest,
            n_pairs=args.n_pairs,
            sanity_fraction=args.sanity_fraction,
            seed=args.seed,
            psnr_tolerance_db=args.psnr_tolerance,
            duplicates=args.duplicates,
        )
        study.write_pairs(manifest, args.out)
        _emit(
            {
                "pairs": args.out,
                "total": len(manifest["pairs"]),
                "counts_per_type_pair": manifest["counts_per_type_pair"],
            }
        )
        return EXIT_OK
    if args.study_cmd == "serve":
        server, state = study.create_server(
            args.pairs,
            args.responses,
            port=args.port,
            assets_dir=args.assets,
            images_root=args.images_root,
        )
        host, port = server.server_address
        print(f"serving 2AFC study on http://{host}:{port}/", file=sys.stderr)
        try:
            server.serve_forever()
        except KeyboardInterrupt:
            pass
        finally:
            server.server_close()
            state.close()
        return EXIT_OK
    report = study.analyze_agreement(args.responses, args.pairs, args.nrq)
    if args.out:
        store.write_json(args.out, report)
    _emit(report)
    return EXIT_OK


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file merged under explicit flags")
    p.add_argument("--print-config", action="store_true", help="print resolved config + hash and exit")
    p.add_argument("--extractor", help="builtin-seeded:<seed> or external:<features-file>")
    p.add_argument("--layers", help="comma-separated encoder layer indices")
    p.add_argument("--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="usqm",
        description="Feature-space ultrasound image quality toolkit",
    )
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("fr-score", help="full-reference score between two images")
    p.add_argument("reference")
    p.add_argument("test")
    p.add_argument("--radius", type=int)
    p.add_argument("--temperature", type=float)
    p.add_argument("--stride", type=int)
    p.add_argument("--token-loss", action="store_true", help="also report the token perceptual loss value")
    _add_common(p)
    p.set_defaults(fn=cmd_fr_score)

    p = sub.add_parser("nrq-fit", help="fit an organ model bank from clean images")
    p.add_argument("manifest", help="JSON-lines manifest of {path, organ}")
    p.add_argument("out", help="bank file to write")
    p.add_argument("--pca-dim", type=int, dest="pca_dim")
    p.add_argument("--components", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--tile-size", type=int, dest="tile_size")
    p.add_argument("--stride", type=int)
    _add_common(p)
    p.set_defaults(fn=cmd_nrq_fit)

    p = sub.add_parser("nrq-score", help="score images against a bank (JSON lines)")
    p.add_argument("bank")
    p.add_argument("inputs", nargs="+", help="image files or directories")
    p.add_argument("--organ", help="organ-aware scoring (default: uniform mixture)")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", help="write JSON lines here instead of stdout")
    p.add_argument("--worst-fraction", type=float, dest="worst_fraction")
    p.add_argument("--fingerprint-policy", choices=("error", "warn"), dest="fingerprint_policy")
    _add_common(p)
    p.set_defaults(fn=cmd_nrq_score)

    p = sub.add_parser("degrade", help="apply a distortion at fixed severity or PSNR target")
    p.add_argument("input")
    p.add_argument("--kind", required=True, choices=degrade_mod.DEFAULT_KINDS + degrade_mod.OPTIONAL_KINDS)
    p.add_argument("--target-psnr", type=float, dest="target_psnr")
    p.add_argument("--theta", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=0.05, help="dB tolerance for PSNR calibration")
    p.add_argument("--out", required=True)
    p.add_argument("--manifest", help="degradations.json to append the row to")
    _add_common(p)
    p.set_defaults(fn=cmd_degrade)

    p = sub.add_parser("eval", help="run an evaluation protocol and write reports")
    p.add_argument(
        "protocol",
        choices=("task-anchor", "cross-organ", "nr-monotonicity", "afc-agreement"),
    )
    p.add_argument("--csv", action="append", default=[], help="input CSV (repeatable for task-anchor)")
    p.add_argument("--responses")
    p.add_argument("--pairs")
    p.add_argument("--nrq")
    p.add_argument("--out-dir", default=".", dest="out_dir")
    _add_common(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("study", help="2AFC study tools")
    ssub = p.add_subparsers(dest="study_cmd", required=True)

    sp = ssub.add_parser("pairgen", help="build a blinded pair manifest")
    sp.add_argument("manifest", help="degradations.json")
    sp.add_argument("--n-pairs", type=int, required=True, dest="n_pairs")
    sp.add_argument("--sanity-fraction", type=float, default=0.0, dest="sanity_fraction")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--duplicates", type=int, default=1)
    sp.add_argument("--psnr-tolerance", type=float, default=study.DEFAULT_PSNR_TOLERANCE_DB, dest="psnr_tolerance")
    sp.add_argument("--out", required=True)
    _add_common(sp)
    sp.set_defaults(fn=cmd_study)

    sp = ssub.add_parser("serve", help="serve the blinded study API and UI assets")
    sp.add_argument("pairs")
    sp.add_argument("--responses", required=True)
    sp.add_argument("--port", type=int, default=8201)
    sp.add_argument("--assets", help="directory of built frontend assets")
    sp.add_argument("--images-root", dest="images_root")
    _add_common(sp)
    sp.set_defaults(fn=cmd_study)

    sp = ssub.add_parser("analyze", help="agreement between readers and scores")
    sp.add_argument("--responses", required=True)
    sp.add_argument("--pairs", required=True)
    sp.add_argument("--nrq", required=True)
    sp.add_argument("--out")
    _add_common(sp)
    sp.set_defaults(fn=cmd_study)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "verbose", False):
        import logging

        logging.basicConfig(level=logging.DEBUG, stream=sys.stderr)
    try:
        return args.fn(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (DecodeError, StoreError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except SchemaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except InsufficientDataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except UnreachableTargetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_TARGET
    except UsqmError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
