"""Command-line orchestration.

Every subcommand writes into its own directory under ``--out`` together with
the exact ``config.json`` it ran with.  Exit codes: 0 success, 1 runtime
failure, 2 usage error or missing prior artifact.  Failures print one JSON
line ``{"error": <category>, "message": ...}`` on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import attacks
from .config import RunConfig
from .errors import IoError, SegVerifyError
from .imagecore import write_image_pgm
from .nnet import load_checkpoint, pearson, predict_batch, save_checkpoint, train_recnet, train_regnet
from .synthdata import build_dataset, load_split
from .verify import (DEFAULT_DSC_GOOD, Label, Thresholds, calibrate_thresholds, error_rates,
                     reconstruct, roc_auc, training_pairs, verdict, verification_score)

log = logging.getLogger("segverify")

SCATTER_KINDS = {
    "ssim-vs-dsc": "ssim",
    "l2-vs-dsc": "l2",
    "regnet-vs-dsc": "predicted_dsc",
}


class UsageError(SegVerifyError):
    category = "usage"


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path: Path, header: list[str], rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter=",", lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -- artifact locations ---------------------------------------------------------------

def data_dir(out: Path) -> Path:
    return out / "data"


def rec_dir(out: Path, recon: str) -> Path:
    return out / f"train-rec-{recon}"


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise UsageError(f"missing {what}: {path} (run the producing subcommand first)")
    return path


def _split(out: Path, split: str):
    _require(data_dir(out) / split / "index.json", f"dataset split '{split}'")
    return load_split(data_dir(out), split)


def _rec_model(out: Path, recon: str):
    return load_checkpoint(_require(rec_dir(out, recon) / "model.json", f"{recon} generator"))


def _reg_model(out: Path):
    return load_checkpoint(_require(out / "train-reg" / "model.json", "regression model"))


def _reg_inputs(records) -> np.ndarray:
    return np.stack([np.stack([r.image, r.seg.astype(np.float64)]) for r in records])


def score_records(records, model, vcfg):
    """(id, reference_dsc, ssim, l2) for every record."""
    rows = []
    for r in records:
        rec = reconstruct(r.image, r.seg, model, vcfg)
        s, l2 = verification_score(r.image, rec, vcfg)
        rows.append((r.id, r.reference_dsc, s, l2))
    return rows


# -- subcommands ----------------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig, out: Path, args) -> dict:
    root = data_dir(out)
    summary = build_dataset(cfg["data"], root)
    cfg.dump(root)
    return {"splits": summary}


def cmd_train_rec(cfg: RunConfig, out: Path, args) -> dict:
    recon = args.recon_loss or cfg["train_rec"]["recon"]
    vcfg = cfg.verify_config()
    records = _split(out, "train")
    if any(r.corrupted for r in records):
        raise UsageError("generator training split must hold reference segmentations only")
    inputs, targets = training_pairs([(r.image, r.reference) for r in records], vcfg)
    tcfg = cfg.train_config("train_rec", recon)
    model = train_recnet((inputs, targets), tcfg, vcfg.ssim, channels=tuple(cfg["train_rec"]["channels"]))
    dest = rec_dir(out, recon)
    save_checkpoint(model, dest / "model")
    h = model.history
    write_csv(dest / "loss.csv", ["step", "recon", "adv", "disc"], zip(h.steps, h.recon, h.adv, h.disc))
    cfg.dump(dest)
    return {"model": str(dest / "model.json"), "final_recon": h.recon[-1] if h.recon else None}


def cmd_train_reg(cfg: RunConfig, out: Path, args) -> dict:
    train = _split(out, "regtrain")
    held = _split(out, cfg["train_reg"]["heldout_split"])
    x, y = _reg_inputs(train), np.array([r.reference_dsc for r in train])
    hx, hy = _reg_inputs(held), np.array([r.reference_dsc for r in held])
    tcfg = cfg.train_config("train_reg")
    model = train_regnet((x, y), tcfg, heldout=(hx, hy), channels=tuple(cfg["train_reg"]["channels"]))
    dest = out / "train-reg"
    save_checkpoint(model, dest / "model")
    pred = predict_batch(model, hx)
    write_csv(dest / "predictions.csv", ["id", "reference_dsc", "predicted_dsc"],
              [(r.id, r.reference_dsc, p) for r, p in zip(held, pred)])
    write_csv(dest / "loss.csv", ["step", "mse"], zip(model.history.steps, model.history.recon))
    metrics = {"heldout_pearson": pearson(pred, hy), "n_train": len(train), "n_heldout": len(held)}
    (dest / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    cfg.dump(dest)
    return metrics


def cmd_calibrate(cfg: RunConfig, out: Path, args) -> dict:
    c = cfg["calibrate"]
    recon = args.recon_loss or c["recon"]
    model = _rec_model(out, recon)
    rows = score_records(_split(out, c["split"]), model, cfg.verify_config())
    th = calibrate_thresholds([(s, d) for _, d, s, _ in rows], float(c["dsc_good"]), float(c["margin"]))
    dest = out / "calibrate"
    write_csv(dest / "scores.csv", ["id", "reference_dsc", "ssim", "l2"], rows)
    (dest / "thresholds.json").write_text(json.dumps(th.to_dict(), indent=2, sort_keys=True) + "\n")
    cfg.dump(dest)
    return th.to_dict()


def _thresholds(out: Path) -> Thresholds:
    path = _require(out / "calibrate" / "thresholds.json", "calibrated thresholds")
    return Thresholds.from_dict(json.loads(path.read_text()))


def cmd_verify(cfg: RunConfig, out: Path, args) -> dict:
    v = cfg["verify"]
    recon = args.recon_loss or v["recon"]
    th = _thresholds(out)
    model = _rec_model(out, recon)
    records = _split(out, v["split"])
    rows = score_records(records, model, cfg.verify_config())
    labels = [verdict(s, th).label for _, _, s, _ in rows]
    dest = out / "verify"
    write_csv(dest / "verify.csv", ["id", "reference_dsc", "ssim", "l2", "verdict"],
              [(i, d, s, l2, lab) for (i, d, s, l2), lab in zip(rows, labels)])
    dsc_good = float(th.report.get("dsc_good", DEFAULT_DSC_GOOD))
    summary = error_rates([r[2] for r in rows], [r[1] for r in rows], th, dsc_good)
    good = np.array([r[1] >= dsc_good for r in rows])
    if good.any() and (~good).any():
        summary["auc_ssim"] = roc_auc([r[2] for r in rows], good)
        summary["auc_neg_l2"] = roc_auc([-r[3] for r in rows], good)
    (dest / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    cfg.dump(dest)
    return summary


def cmd_attack_reg(cfg: RunConfig, out: Path, args) -> dict:
    a = cfg["attack_reg"]
    if args.eps is not None:
        a["epsilon"] = args.eps
    spec = cfg.attack_spec("attack_reg")
    model = _reg_model(out)
    dsc_good = float(cfg["calibrate"]["dsc_good"])
    records = [r for r in _split(out, a["split"]) if r.reference_dsc <= float(a["max_dsc"])]
    dest = out / "attack-reg"
    img_dir = dest / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    rows, fooled = [], 0
    for r in records:
        res = attacks.attack_regnet(model, r.image, r.seg, r.reference_dsc, spec)
        vb = Label.ACCEPT if res.score_before >= dsc_good else Label.REJECT
        va = Label.ACCEPT if res.score_after >= dsc_good else Label.REJECT
        ok = res.score_after >= r.reference_dsc + 0.3
        fooled += ok
        rows.append((r.id, spec.epsilon, res.score_before, res.score_after, vb, va, r.reference_dsc, int(ok)))
        write_image_pgm(img_dir / f"{r.id}_img_after.pgm", res.image)
        write_image_pgm(img_dir / f"{r.id}_seg_after.pgm", res.seg)
    write_csv(dest / "attack_reg.csv",
              ["id", "eps", "score_before", "score_after", "verdict_before", "verdict_after",
               "reference_dsc", "raised_by_0.3"], rows)
    summary = {"n": len(rows), "fooled_fraction": fooled / len(rows) if rows else 0.0}
    (dest / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    cfg.dump(dest)
    return summary


def cmd_attack_ver(cfg: RunConfig, out: Path, args) -> dict:
    a = cfg["attack_ver"]
    if args.eps is not None:
        a["epsilon"] = args.eps
    if args.iters is not None:
        a["iters"] = args.iters
    spec = cfg.attack_spec("attack_ver")
    vcfg = cfg.verify_config()
    th = _thresholds(out)
    dsc_good = float(th.report.get("dsc_good", DEFAULT_DSC_GOOD))
    model = _rec_model(out, args.recon_loss or a["recon"])
    records = [r for r in _split(out, a["split"]) if r.reference_dsc < dsc_good][: int(a["limit"])]
    dest = out / "attack-ver"
    img_dir = dest / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    rows, traj_rows = [], []
    for r in records:
        res = attacks.attack_verifier(model, th, r.image, r.seg, spec, vcfg)
        rows.append((r.id, spec.epsilon, res.score_before, res.score_after, res.verdict_before,
                     res.verdict_after, res.best_score, int(res.ever_accepted), r.reference_dsc))
        traj_rows.extend((r.id, k, s) for k, s in enumerate(res.trajectory))
        write_image_pgm(img_dir / f"{r.id}_img_before.pgm", r.image)
        write_image_pgm(img_dir / f"{r.id}_img_after.pgm", res.image)
        write_image_pgm(img_dir / f"{r.id}_rec_before.pgm", reconstruct(r.image, r.seg, model, vcfg))
        write_image_pgm(img_dir / f"{r.id}_rec_after.pgm", reconstruct(res.image, r.seg, model, vcfg))
    write_csv(dest / "attack_ver.csv",
              ["id", "eps", "score_before", "score_after", "verdict_before", "verdict_after",
               "best_score", "ever_accepted", "reference_dsc"], rows)
    write_csv(dest / "trajectories.csv", ["id", "iteration", "ssim"], traj_rows)
    deltas = [row[3] - row[2] for row in rows]
    summary = {
        "n": len(rows),
        "flipped_to_accept": int(sum(row[7] for row in rows)),
        "median_ssim_change": float(np.median(deltas)) if deltas else 0.0,
        "max_ssim_change": float(np.max(deltas)) if deltas else 0.0,
    }
    (dest / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    cfg.dump(dest)
    return summary


def cmd_export_scatter(cfg: RunConfig, out: Path, args) -> dict:
    kind = args.kind
    column = SCATTER_KINDS[kind]
    split = cfg["export"]["split"]
    dest = out / "scatter"
    if kind == "regnet-vs-dsc":
        model = _reg_model(out)
        records = _split(out, split)
        pred = predict_batch(model, _reg_inputs(records))
        rows = [(r.reference_dsc, p) for r, p in zip(records, pred)]
    else:
        # L2 scatter defaults to the MAE-trained generator, SSIM scatter to the SSIM-trained one.
        recon = args.recon_loss or ("mae" if kind == "l2-vs-dsc" else "ssim")
        scored = score_records(_split(out, split), _rec_model(out, recon), cfg.verify_config())
        rows = [(d, s if column == "ssim" else l2) for _, d, s, l2 in scored]
    path = dest / f"{kind}.csv"
    write_csv(path, ["reference_dsc", column], rows)
    cfg.dump(dest)
    return {"path": str(path), "n": len(rows)}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-rec": cmd_train_rec,
    "train-reg": cmd_train_reg,
    "verify": cmd_verify,
    "calibrate": cmd_calibrate,
    "attack-reg": cmd_attack_reg,
    "attack-ver": cmd_attack_ver,
    "export-scatter": cmd_export_scatter,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", type=Path, default=Path("runs/default"))
    common.add_argument("--threads", type=int, help="cap on BLAS worker threads (default 1)")
    common.add_argument("--eps", type=float)
    common.add_argument("--iters", type=int)
    common.add_argument("--steps", type=int, help="override training steps")
    common.add_argument("--patch-size", type=int)
    common.add_argument("--strip-width", type=int)
    common.add_argument("--recon-loss", choices=("mae", "ssim"))
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="segverify", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "export-scatter":
            p.add_argument("--kind", choices=sorted(SCATTER_KINDS), required=True)
    return parser


def _resolve_config(args) -> RunConfig:
    if args.config is not None:
        if not args.config.exists():
            raise UsageError(f"config file not found: {args.config}")
        cfg = RunConfig.load(args.config)
    else:
        cfg = RunConfig()
    cfg.override("pipeline", patch=args.patch_size, strip_width=args.strip_width)
    if args.seed is not None:
        cfg.data["seed"] = args.seed
    if args.threads is not None:
        cfg.data["threads"] = args.threads
    if args.steps is not None:
        section = "train_reg" if args.command == "train-reg" else "train_rec"
        cfg.data[section]["steps"] = args.steps
    cfg.data["data"]["seed"] = cfg.seed
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = _resolve_config(args)
        out = args.out
        out.mkdir(parents=True, exist_ok=True)
        t0 = time.perf_counter()
        with threadpool_limits(limits=max(1, int(cfg["threads"]))):
            result = COMMANDS[args.command](cfg, out, args)
        log.info("%s finished in %.1fs", args.command, time.perf_counter() - t0)
    except UsageError as exc:
        print(json.dumps({"error": exc.category, "message": str(exc)}), file=sys.stderr)
        return 2
    except IoError as exc:
        code = 2 if isinstance(exc.__cause__, FileNotFoundError) else 1
        print(json.dumps({"error": exc.category, "message": str(exc)}), file=sys.stderr)
        return code
    except SegVerifyError as exc:
        print(json.dumps({"error": exc.category, "message": str(exc)}), file=sys.stderr)
        return 1
    print(json.dumps(result, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
