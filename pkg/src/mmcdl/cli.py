"""Command-line front end: ``mmcdl {train,denoise,sr,inpaint,synth,eval}``.

Settings resolve as flags > ``--config`` JSON file > built-in defaults, and
the resolved settings are printed as JSON before a command runs. Exit codes:
0 success, 2 bad usage or input, 3 numerical failure.
"""

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from mmcdl import io as mio
from mmcdl.dictlearn import DENOISE, SUPERRES, TrainConfig, train_coupled
from mmcdl.errors import InputError, NumericalError
from mmcdl.metrics import error_map_8bit, evaluate

log = logging.getLogger("mmcdl")

DEFAULTS = {
    "seed": 0,
    "threads": 1,
    "patch_side": 8,
    "stride": 1,
    "sparsity": 4,
    "iterations": 20,
    "atoms_per_group": None,  # per command: 64 for train, n // 8 for synth
    "sigma": None,            # 0-255 scale
    "mu": None,
    "scale": 4,
    "peak": 1.0,
    "out": None,
    "report": None,
}

SHARED = tuple(DEFAULTS)

COMMAND_DEFAULTS = {
    "train": {"out": "dictionary.cpdl", "atoms_per_group": 64},
    "denoise": {"out": "denoised.png"},
    "sr": {"out": "super_resolved.png"},
    "inpaint": {"out": "inpainted.png"},
    "synth": {"out": "synth"},
    "eval": {},
}


def _shared_parser():
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("shared settings")
    g.add_argument("--config", help="JSON file with default settings")
    g.add_argument("--seed", type=int)
    g.add_argument("--threads", type=int)
    g.add_argument("--patch-side", type=int)
    g.add_argument("--stride", type=int)
    g.add_argument("--sparsity", type=int)
    g.add_argument("--iterations", type=int)
    g.add_argument("--atoms-per-group", type=int)
    g.add_argument("--sigma", type=float, help="noise std on the 0-255 scale")
    g.add_argument("--mu", type=float)
    g.add_argument("--scale", type=int)
    g.add_argument("--peak", type=float)
    g.add_argument("--out")
    g.add_argument("--report")
    g.add_argument("-v", "--verbose", action="count", default=0)
    return p


def build_parser():
    shared = _shared_parser()
    ap = argparse.ArgumentParser(prog="mmcdl", description="Coupled-dictionary guided image restoration.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[shared], help="learn a coupled dictionary")
    p.add_argument("--manifest", required=True)
    p.add_argument("--layout", choices=(DENOISE, SUPERRES))

    p = sub.add_parser("denoise", parents=[shared], help="guided denoising")
    p.add_argument("--noisy", required=True)
    p.add_argument("--guidance", required=True)
    p.add_argument("--dict", required=True)
    p.add_argument("--truth")

    p = sub.add_parser("sr", parents=[shared], help="guided super-resolution")
    p.add_argument("--lr", required=True)
    p.add_argument("--guidance", required=True)
    p.add_argument("--dict", required=True)
    p.add_argument("--truth")

    p = sub.add_parser("inpaint", parents=[shared], help="guided inpainting")
    p.add_argument("--corrupted", required=True)
    p.add_argument("--mask", required=True, help="observation map, 255 (or 1) = observed")
    p.add_argument("--guidance", required=True)
    p.add_argument("--dict", required=True)
    p.add_argument("--truth")

    p = sub.add_parser("synth", parents=[shared], help="synthetic planted data")
    p.add_argument("--kind", choices=("coupled-pair", "planted-dict"), default="coupled-pair")
    p.add_argument("--layout", choices=(DENOISE, SUPERRES))
    p.add_argument("--tiles", type=int, default=16, help="tiles per image side")
    p.add_argument("--hide", type=float, default=0.0,
                   help="fraction of target pixels to hide (writes mask and corrupted image)")

    p = sub.add_parser("eval", parents=[shared], help="compare a result with the truth")
    p.add_argument("--truth", required=True)
    p.add_argument("--candidate", required=True)
    p.add_argument("--error-map", help="8-bit error map output (default: <out> if given)")
    p.add_argument("--error-max", type=float, default=0.1, help="error mapped to white")
    return ap


def _norm_key(k):
    return k.replace("-", "_")


def load_config_file(path):
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise InputError(f"{p}: config file not found")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"{p}: invalid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise InputError(f"{p}: config must be a JSON object")
    out = {_norm_key(k): v for k, v in raw.items()}
    unknown = sorted(set(out) - set(SHARED) - {"layout"})
    if unknown:
        raise InputError(f"{p}: unknown config keys {unknown}")
    return out


def resolve_config(args):
    """Merge defaults, command defaults, the config file and explicit flags."""
    cfg = dict(DEFAULTS)
    cfg.update(COMMAND_DEFAULTS.get(args.command, {}))
    explicit = set()
    from_file = load_config_file(args.config)
    cfg.update(from_file)
    explicit.update(from_file)
    for key in SHARED + ("layout",):
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
            explicit.add(key)
    return cfg, explicit


def _print_config(command, cfg, extra):
    doc = {"command": command, "config": cfg}
    doc.update(extra)
    print(json.dumps(doc, sort_keys=True, default=str))
    sys.stdout.flush()


def _report_dict(r):
    return {k: (v if not (isinstance(v, float) and math.isinf(v)) else "inf")
            for k, v in r.as_row().items()}


def _finish_report(cfg, out, truth_path, name):
    if truth_path is None:
        return None
    truth = mio.load_image(truth_path)
    rep = evaluate(truth, out, cfg["peak"], name=name)
    print(json.dumps(_report_dict(rep), sort_keys=True))
    if cfg["report"]:
        mio.write_report(cfg["report"], [rep])
    return rep


def _sigma01(cfg):
    return None if cfg["sigma"] is None else cfg["sigma"] / 255.0


def cmd_train(args, cfg, explicit):
    man = mio.load_manifest(args.manifest)
    if "patch_side" in explicit:
        man.patch_side = cfg["patch_side"]
    if "layout" in explicit:
        man.layout = cfg["layout"]
    if "scale" in explicit:
        man.scale = cfg["scale"]
    if "sigma" in explicit:
        man.sigma = _sigma01(cfg)
    corpus = mio.ingest_corpus(man)
    if corpus.signals.shape[1] == 0:
        raise InputError("the manifest yields no training patches (samples_per_pair is 0)")
    tc = TrainConfig(K=cfg["atoms_per_group"], s=cfg["sparsity"], iterations=cfg["iterations"],
                     seed=cfg["seed"], threads=cfg["threads"])
    prov = {"corpus_hash": corpus.corpus_hash, "remove_dc": bool(man.remove_dc),
            "layout": man.layout, "samples": int(corpus.signals.shape[1])}
    if man.layout == SUPERRES:
        prov["scale"] = man.scale
    cd = train_coupled(corpus.signals, tc, man.layout, patch_side=man.patch_side, provenance=prov)
    mio.save_dictionary(cfg["out"], cd)
    report = cfg["report"] or str(Path(cfg["out"]).with_suffix("")) + "_objective.csv"
    mio.write_objective_log(report, cd.objective_log)
    print(json.dumps({"dictionary": str(cfg["out"]), "objective_log": report,
                      "final_objective": cd.objective_log[-1]}, sort_keys=True))


def _save_output(path, img):
    mio.save_image(path, img)
    print(json.dumps({"output": str(path)}))


def cmd_denoise(args, cfg, explicit):
    from mmcdl.tasks import DenoiseConfig, denoise
    if cfg["sigma"] is None:
        raise InputError("denoise needs --sigma (noise std on the 0-255 scale)")
    cd = mio.load_dictionary(args.dict)
    noisy = mio.load_image(args.noisy)
    guidance = mio.load_image(args.guidance)
    dc = DenoiseConfig(sigma=_sigma01(cfg), mu=cfg["mu"], stride=cfg["stride"],
                       max_sparsity=cfg["sparsity"] if "sparsity" in explicit else None,
                       patch_side=cfg["patch_side"] if "patch_side" in explicit else None,
                       threads=cfg["threads"])
    out = denoise(noisy, guidance, cd, dc)
    _save_output(cfg["out"], out)
    _finish_report(cfg, out, args.truth, Path(args.noisy).stem)


def cmd_sr(args, cfg, explicit):
    from mmcdl.tasks import SrConfig, superresolve
    cd = mio.load_dictionary(args.dict)
    lr = mio.load_image(args.lr)
    guidance = mio.load_image(args.guidance)
    sc = SrConfig(scale_factor=cfg["scale"], stride=cfg["stride"],
                  max_sparsity=cfg["sparsity"] if "sparsity" in explicit else None,
                  patch_side=cfg["patch_side"] if "patch_side" in explicit else None,
                  threads=cfg["threads"])
    out = superresolve(lr, guidance, cd, sc)
    _save_output(cfg["out"], out)
    _finish_report(cfg, out, args.truth, Path(args.lr).stem)


def cmd_inpaint(args, cfg, explicit):
    from mmcdl.tasks import InpaintConfig, inpaint
    cd = mio.load_dictionary(args.dict)
    corrupted = mio.load_image(args.corrupted)
    mask = mio.load_image(args.mask)
    guidance = mio.load_image(args.guidance)
    ic = InpaintConfig(stride=cfg["stride"],
                       max_sparsity=cfg["sparsity"] if "sparsity" in explicit else None,
                       patch_side=cfg["patch_side"] if "patch_side" in explicit else None,
                       threads=cfg["threads"])
    out = inpaint(corrupted, mask, guidance, cd, ic)
    _save_output(cfg["out"], out)
    _finish_report(cfg, out, args.truth, Path(args.corrupted).stem)


def _write_pair_image(outdir, name, img):
    mio.save_image(outdir / f"{name}.npy", img)
    mio.save_image(outdir / f"{name}.png", img)


def cmd_synth(args, cfg, explicit):
    from mmcdl import synth
    from mmcdl.tasks import add_gaussian_noise, degrade_for_sr
    outdir = Path(cfg["out"])
    outdir.mkdir(parents=True, exist_ok=True)
    layout = cfg.get("layout") or DENOISE
    p = cfg["patch_side"]
    K = cfg["atoms_per_group"] or max((p * p) // 8, 1)
    cd = synth.planted_dictionary(layout, p, K, seed=cfg["seed"], dc_atoms=True,
                                  sparsity=cfg["sparsity"], scale=cfg["scale"])
    mio.save_dictionary(outdir / "dictionary.cpdl", cd)
    written = ["dictionary.cpdl"]
    if args.kind == "coupled-pair":
        # at large scales the target-specific detail cannot be seen in the LR
        # rows, so super-resolution data keeps all target detail shared
        pair = synth.synth_coupled_pair(cd, args.tiles, args.tiles, cfg["sparsity"],
                                        seed=cfg["seed"], target_specific=layout == DENOISE)
        _write_pair_image(outdir, "truth", pair["target"])
        _write_pair_image(outdir, "guidance", pair["guidance"])
        np.save(outdir / "codes.npy", pair["codes"])
        written += ["truth", "guidance", "codes.npy"]
        if cfg["sigma"]:
            noisy = add_gaussian_noise(pair["target"], _sigma01(cfg), seed=cfg["seed"])
            _write_pair_image(outdir, "noisy", noisy)
            written.append("noisy")
        if layout == SUPERRES:
            _write_pair_image(outdir, "lr", degrade_for_sr(pair["target"], cfg["scale"]))
            written.append("lr")
        if args.hide > 0:
            rng = np.random.default_rng([cfg["seed"], 7])
            mask = (rng.random(pair["target"].shape) >= args.hide).astype(np.float64)
            mio.save_image(outdir / "mask.png", mask)
            _write_pair_image(outdir, "corrupted", np.where(mask == 1, pair["target"], 0.0))
            written += ["mask.png", "corrupted"]
    print(json.dumps({"out_dir": str(outdir), "written": written,
                      "coherence": cd.provenance["coherence"]}, sort_keys=True))


def cmd_eval(args, cfg, explicit):
    truth = mio.load_image(args.truth)
    cand = mio.load_image(args.candidate)
    rep = evaluate(truth, cand, cfg["peak"], name=Path(args.candidate).stem)
    print(json.dumps(_report_dict(rep), sort_keys=True))
    if cfg["report"]:
        mio.write_report(cfg["report"], [rep])
    emap = args.error_map or cfg["out"]
    if emap:
        from PIL import Image
        Image.fromarray(error_map_8bit(truth, cand, args.error_max)).save(emap)


COMMANDS = {
    "train": cmd_train, "denoise": cmd_denoise, "sr": cmd_sr,
    "inpaint": cmd_inpaint, "synth": cmd_synth, "eval": cmd_eval,
}


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg, explicit = resolve_config(args)
        extra = {k: v for k, v in sorted(vars(args).items())
                 if k not in SHARED and k not in ("command", "config", "verbose", "layout")}
        _print_config(args.command, cfg, {"inputs": extra})
        COMMANDS[args.command](args, cfg, explicit)
    except InputError as exc:
        print(f"mmcdl {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"mmcdl {args.command}: numerical failure: {exc}", file=sys.stderr)
        return 3
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"mmcdl {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
