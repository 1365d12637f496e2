"""``affordpose`` command line.

Exit status: 0 on success, 2 on usage or configuration errors, 1 on any
runtime failure (with a one-line message on stderr).
"""

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path


from . import __version__
from .affordance import (SIZES, AffordanceDescription, CaptionError, ImageRef, TextServiceClient,
                         atomic_write_text, caption)
from .config import ConfigError, load_config
from .dataset import DatasetError, read_dataset, select_split, subsample, write_dataset
from .denoiser import TrainingDivergedError, load_weights, save_weights
from .diffusion import SamplingDivergedError, make_schedule
from .hand_model import HandModelError, finger_curl, forward_kinematics, load_hand_model, make_toy_hand
from .occlusion import occlusion_labels
from . import pipeline
from .synthetic import make_synthetic_dataset

log = logging.getLogger("affordpose")

RUNTIME_ERRORS = (DatasetError, CaptionError, HandModelError, TrainingDivergedError, SamplingDivergedError,
                  ValueError, KeyError, OSError)


class UsageError(Exception):
    pass


def _write_manifest(path, command, cfg, extra):
    manifest = {
        "command": command,
        "version": __version__,
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        **extra,
    }
    atomic_write_text(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    log.info("%s: config %s seed %d", command, cfg.hash()[:12], cfg.seed)


def _manifest_path(out):
    out = Path(out)
    return out.with_name(out.name + ".manifest.json")


def _hand_model(args, cfg, data_path=None):
    if getattr(args, "model", None):
        return load_hand_model(args.model)
    if cfg.paths.hand_model:
        return load_hand_model(cfg.paths.hand_model)
    if data_path is not None:
        beside = Path(data_path).parent / "hand_model.json"
        if beside.exists():
            log.info("using hand model %s", beside)
            return load_hand_model(beside)
    return make_toy_hand()


def _schedule(cfg):
    s = cfg.schedule
    return make_schedule(s.T, s.beta_start, s.beta_end)


def _records(path, split, part, every):
    records = read_dataset(path)
    records = select_split(records, split, part)
    if every and every > 1:
        records = subsample(records, every)
    return records


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_make_data(args, cfg):
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    model = _hand_model(args, cfg)
    out = Path(args.out)
    records = make_synthetic_dataset(out, args.n, cfg.seed, model)
    _write_manifest(out / "manifest.json", "make-data", cfg, {"n": len(records), "outputs": ["data.jsonl"]})
    print(f"wrote {len(records)} records to {out / 'data.jsonl'}")


def cmd_train(args, cfg):
    records = _records(args.data, cfg.split, "train", args.every)
    weights, losses = pipeline.train_prior(records, cfg.train_config(), _schedule(cfg), cfg.net_config())
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_weights(weights, out)
    loss_csv = Path(args.loss_csv) if args.loss_csv else out.with_suffix(".loss.csv")
    with open(loss_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        for i, v in enumerate(losses, start=1):
            writer.writerow([i, repr(float(v))])
    _write_manifest(_manifest_path(out), "train", cfg, {
        "records": len(records), "split": cfg.split, "outputs": [out.name, loss_csv.name]})
    if len(losses):
        print(f"trained on {len(records)} records; loss {losses[0]:.4f} -> {losses[-1]:.4f}")


def _description_from_args(args):
    if args.description:
        text = args.description
        if text.startswith("@"):
            text = Path(text[1:]).read_text()
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise UsageError(f"--description is not valid JSON: {exc.msg}") from None
        desc = AffordanceDescription.from_dict(d)
    else:
        missing = [k for k in ("category", "shape", "size", "interaction", "intention", "taxonomy")
                   if getattr(args, k) is None]
        if missing:
            raise UsageError("give --description or all of --category/--shape/--size/--interaction/"
                             f"--intention/--taxonomy (missing: {', '.join(missing)})")
        desc = AffordanceDescription(args.category, args.shape, args.size, args.interaction, args.intention,
                                     args.taxonomy)
    return desc


def cmd_sample(args, cfg):
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    desc = _description_from_args(args)
    weights = load_weights(args.weights)
    poses = pipeline.sample_poses(weights, desc, args.n, _schedule(cfg), seed=cfg.seed,
                                  cfg_scale=cfg.refine.cfg_scale)
    curl = finger_curl(poses)
    result = {"description": desc.to_dict(), "n": args.n, "mean_finger_curl": float(curl.mean()),
              "poses": poses.tolist()}
    out = Path(args.out)
    atomic_write_text(out, json.dumps(result) + "\n")
    _write_manifest(_manifest_path(out), "sample", cfg, {"n": args.n, "outputs": [out.name]})
    print(f"sampled {args.n} poses; mean finger curl {curl.mean():.4f} rad")


def cmd_caption(args, cfg):
    c = cfg.caption
    fixtures = args.fixtures or c.fixtures
    endpoint = args.endpoint or c.endpoint
    if not fixtures and not endpoint:
        raise UsageError("caption needs --fixtures or --endpoint (or caption.fixtures / caption.endpoint)")
    client = TextServiceClient(endpoint=endpoint, model=c.model, api_key_env=c.api_key_env,
                               fixtures_dir=fixtures, max_tokens=c.max_tokens, timeout=c.timeout,
                               attempts=c.attempts, record=args.record)
    lines = []
    with open(args.requests) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                req = json.loads(line)
                image = ImageRef(req["image"], int(req["width"]), int(req["height"]))
                hand_box, object_box = req["hand_box"], req["object_box"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DatasetError(f"{args.requests}:{lineno}: bad caption request ({exc})") from None
            try:
                desc = caption(client, image, hand_box, object_box, req.get("gt_taxonomy"),
                               cache_dir=args.cache or c.cache)
            except CaptionError as exc:
                raise CaptionError(f"{args.requests}:{lineno}: {exc}") from None
            lines.append(json.dumps({"id": req.get("id", str(lineno)), "description": desc.to_dict()},
                                    sort_keys=True))
    out = Path(args.out)
    atomic_write_text(out, "".join(line + "\n" for line in lines))
    _write_manifest(_manifest_path(out), "caption", cfg, {"n": len(lines), "outputs": [out.name]})
    print(f"captioned {len(lines)} requests")


def cmd_occlude(args, cfg):
    src = Path(args.input)
    records = read_dataset(src)
    model = _hand_model(args, cfg, src)
    out_records = []
    for r in records:
        mask = r.load_mask(src.parent)
        if mask is None:
            raise DatasetError(f"record {r.id}: occlude needs mask_path")
        pose = r.initial_pose if r.initial_pose is not None else r.gt_pose
        kps, verts = forward_kinematics(model, pose)
        out_records.append(r.with_(occlusion=occlusion_labels(verts, model.faces, kps, r.camera, mask)))
    out = Path(args.out)
    _write_records_beside(out, out_records, src.parent)
    _write_manifest(_manifest_path(out), "occlude", cfg, {"n": len(out_records), "outputs": [out.name]})
    print(f"labelled {len(out_records)} records")


def _write_records_beside(out, records, base_dir):
    """Write records, rebasing relative mask paths if the output moves directory."""
    out = Path(out).resolve()
    base = Path(base_dir).resolve()
    if out.parent != base:
        records = [r.with_(mask_path=str(Path(base / r.mask_path).resolve())) if r.mask_path else r
                   for r in records]
    write_dataset(out, records)


def cmd_refine(args, cfg):
    src = Path(args.input)
    split = args.split or "none"
    records = _records(src, split, "test", args.every)
    model = _hand_model(args, cfg, src)
    weights = load_weights(args.weights)
    refined = pipeline.refine_records(records, model, weights, _schedule(cfg), cfg.refine_config(), src.parent)
    out = Path(args.out)
    _write_records_beside(out, refined, src.parent)
    _write_manifest(_manifest_path(out), "refine", cfg, {"n": len(refined), "split": split,
                                                         "outputs": [out.name]})
    print(f"refined {len(refined)} records")


def cmd_evaluate(args, cfg):
    gt_path, pred_path = Path(args.gt), Path(args.pred)
    gt = read_dataset(gt_path)
    pred = read_dataset(pred_path)
    model = _hand_model(args, cfg, gt_path)
    reports = {f: pipeline.evaluate_records(gt, pred, model, f, pred_path.parent) for f in args.pred_field}
    out = Path(args.out)
    atomic_write_text(out, json.dumps({f: r.to_dict() for f, r in reports.items()}, indent=2) + "\n")
    tables = [r.table(f).splitlines() for f, r in reports.items()]
    text = "\n".join(tables[0][:2] + [row for t in tables for row in t[2:]])
    atomic_write_text(out.with_suffix(".txt"), text + "\n")
    _write_manifest(_manifest_path(out), "evaluate", cfg, {"n": len(pred), "outputs": [out.name]})
    print(text)


# --------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="affordpose", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True, model=True):
        if seed:
            sp.add_argument("--seed", type=int, help="overrides the config seed")
        if model:
            sp.add_argument("--model", help="hand-model JSON (default: the built-in toy rig)")

    s = sub.add_parser("make-data", help="write a synthetic grasp-family dataset")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--n", type=int, default=500)
    common(s)
    s.set_defaults(func=cmd_make_data)

    s = sub.add_parser("train", help="train the conditional pose prior")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="weights file")
    s.add_argument("--loss-csv")
    s.add_argument("--split", choices=["s1-like", "none"])
    s.add_argument("--every", type=int, default=1, help="keep every n-th record (10 = one-tenth)")
    s.add_argument("--steps", type=int)
    common(s, model=False)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="draw poses from the prior for one description")
    s.add_argument("--weights", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=16)
    s.add_argument("--description", help="description JSON, or @file")
    s.add_argument("--category")
    s.add_argument("--shape")
    s.add_argument("--size", choices=SIZES)
    s.add_argument("--interaction")
    s.add_argument("--intention")
    s.add_argument("--taxonomy", type=int)
    common(s, model=False)
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("caption", help="affordance descriptions via the text service or fixtures")
    s.add_argument("--requests", required=True, help="JSONL: id, image, width, height, hand_box, object_box")
    s.add_argument("--out", required=True)
    s.add_argument("--fixtures")
    s.add_argument("--endpoint")
    s.add_argument("--cache")
    s.add_argument("--record", action="store_true", help="store live responses as fixtures")
    common(s, seed=False, model=False)
    s.set_defaults(func=cmd_caption)

    s = sub.add_parser("occlude", help="recompute occlusion labels from pose and mask")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    common(s, seed=False)
    s.set_defaults(func=cmd_occlude)

    s = sub.add_parser("refine", help="occlusion-aware refinement of initial poses")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--weights", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--split", choices=["s1-like", "none"], help="s1-like refines only test subjects")
    s.add_argument("--every", type=int, default=1)
    common(s)
    s.set_defaults(func=cmd_refine)

    s = sub.add_parser("evaluate", help="PA-MPJPE report by occlusion bin")
    s.add_argument("--gt", required=True)
    s.add_argument("--pred", required=True)
    s.add_argument("--pred-field", nargs="+", default=["refined_pose"],
                   choices=["refined_pose", "initial_pose", "gt_pose"])
    s.add_argument("--out", required=True, help="JSON report (a .txt table is written beside it)")
    common(s, seed=False)
    s.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config).with_seed(getattr(args, "seed", None))
        if args.command == "train":
            if args.split:
                cfg = replace(cfg, split=args.split)
            if args.steps is not None:
                cfg = replace(cfg, train=replace(cfg.train, steps=args.steps))
        args.func(args, cfg)
    except (UsageError, ConfigError) as exc:
        print(f"affordpose {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except RUNTIME_ERRORS as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"affordpose {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
