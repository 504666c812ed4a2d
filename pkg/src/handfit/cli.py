"""Command-line entry points: synth, fit, eval, render, weight-search, quat-check, grad-check.

Exit codes: 0 success, 1 a fit or check failed, 2 bad input.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import io
from . import losses as L
from .fitter import (DivergenceError, FitConfig, FrameData, camera_joints, fit_sequence,
                     sequence_quat_loss, write_trace)
from .hand_model import ModelError, apply_global_transform, default_model
from .render import CameraModel, lighted_texture, render_hand

log = logging.getLogger("handfit")

EXIT_OK, EXIT_FAIL, EXIT_INPUT = 0, 1, 2


class InputError(Exception):
    """Bad user input; reported with exit code 2."""


def _threads() -> int:
    raw = os.environ.get("HANDFIT_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise InputError(f"HANDFIT_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def _load_json(path, what):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise InputError(f"{what} file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{what} file {path} is not valid JSON: {exc}") from None


def _weights(path) -> L.LossWeights:
    if path is None:
        return L.LossWeights()
    try:
        return L.LossWeights.from_dict(_load_json(path, "weights"))
    except L.LossError as exc:
        raise InputError(f"{path}: {exc}") from None


def _config(path, seed=None) -> FitConfig:
    d = {} if path is None else _load_json(path, "config")
    if seed is not None:
        d["seed"] = seed
    try:
        return FitConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise InputError(f"{path}: {exc}") from None


def _manifest(path) -> io.Manifest:
    if path is None:
        raise InputError("--manifest is required")
    try:
        return io.load_manifest(path)
    except FileNotFoundError:
        raise InputError(f"manifest not found: {path}") from None
    except io.FormatError as exc:
        raise InputError(str(exc)) from None


def _frames(seq: io.Sequence) -> list:
    out = []
    for fr in seq.frames:
        if fr.image_path is None:
            raise InputError(f"sequence {seq.id} frame {fr.index}: no image")
        try:
            img = fr.load_image()
        except (OSError, io.FormatError) as exc:
            raise InputError(f"sequence {seq.id} frame {fr.index}: {exc}") from None
        if img.shape[:2] != (fr.camera.height, fr.camera.width):
            raise InputError(f"sequence {seq.id} frame {fr.index}: image size {img.shape[1]}x{img.shape[0]} "
                             f"does not match camera {fr.camera.width}x{fr.camera.height}")
        out.append(FrameData(img, fr.keypoints, fr.camera))
    return out


def _ground_truth(seq: io.Sequence):
    if any(fr.gt_path is None for fr in seq.frames):
        return None
    joints, verts = [], []
    for fr in seq.frames:
        d = _load_json(fr.gt_path, "ground-truth")
        joints.append(d["joints"])
        verts.append(d.get("vertices"))
    j = np.array(joints, dtype=float)
    v = np.array(verts, dtype=float) if all(x is not None for x in verts) else None
    return j, v


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


# ------------------------------------------------------------------ synth


def cmd_synth(args) -> int:
    from . import synth

    cam = CameraModel()
    frames = synth.make_sequence(args.frames, seed=args.seed, cam=cam, noise=args.noise, fps=args.fps)
    path = synth.write_sequence(args.out, frames, cam, args.sequence)
    print(f"wrote {len(frames)} frames to {path}")
    return EXIT_OK


# ------------------------------------------------------------------ fit


def _render_preview(path, params, cam, model):
    dec = model.decode(params.theta, params.beta)
    mesh, _ = apply_global_transform(model.mesh(dec.vertices), dec.joints, params.scale, params.rot, params.trans)
    out = render_hand(mesh.vertices, model.faces, params.texture, params.light, model.canonical_normals, cam)
    io.write_image(path, np.where(out.silhouette[..., None], out.color, 0.0))


def cmd_fit(args) -> int:
    weights = _weights(args.weights)
    config = _config(args.config, args.seed)
    if args.mode == "image":
        weights = weights.replace(w_quat=0.0, w_ts=0.0)
    manifest = _manifest(args.manifest)
    jobs = [(seq, _frames(seq)) for seq in manifest.sequences]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = default_model()
    failed = []
    with ThreadPoolExecutor(_threads()) as pool:
        futures = [(seq, frames, pool.submit(fit_sequence, frames, weights, config, mode=args.mode))
                   for seq, frames in jobs]
        # all writes happen here, in submission order
        for seq, frames, fut in futures:
            try:
                res = fut.result()
            except (DivergenceError, FloatingPointError, ModelError, ValueError) as exc:
                log.error("sequence %s failed: %s", seq.id, exc)
                failed.append(seq.id)
                continue
            d = out / seq.id
            d.mkdir(exist_ok=True)
            trace = res.warmup_trace + res.trace
            write_trace(d / "trace.csv", trace)
            io.save_checkpoint(d / "params.json", res.params, [f.index for f in seq.frames], {
                "sequence": seq.id, "mode": args.mode, "weights": weights.to_dict(),
                "config": config.to_dict(), "cameras": [f.camera.to_dict() for f in frames]})
            for fr, p, fd in zip(seq.frames, res.params, frames):
                _render_preview(d / f"preview_{fr.index:05d}.ppm", p, fd.camera, model)
            # the video stage adds terms, so compare within the last stage
            first, last = res.trace[0]["total"], res.trace[-1]["best"]
            print(f"{seq.id}: {len(frames)} frames, {args.mode} objective {first:.6g} -> {last:.6g}")
    if failed:
        print(f"failed sequences: {', '.join(failed)}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


# ------------------------------------------------------------------ eval


def _load_predictions(path):
    p = Path(path)
    if p.is_dir():
        p = p / "params.json"
    try:
        params, doc = io.load_checkpoint(p)
    except FileNotFoundError:
        raise InputError(f"prediction file not found: {p}") from None
    except (io.FormatError, KeyError, json.JSONDecodeError) as exc:
        raise InputError(f"{p}: {exc}") from None
    return params, doc


def cmd_eval(args) -> int:
    from .metrics import consistency_sd, evaluate

    model = default_model()
    params, doc = _load_predictions(args.pred)
    gt = None
    if args.manifest:
        manifest = _manifest(args.manifest)
        sid = args.sequence or doc.get("sequence")
        seqs = [s for s in manifest.sequences if s.id == sid] if sid else manifest.sequences[:1]
        if not seqs:
            raise InputError(f"sequence {sid!r} not in manifest")
        gt = _ground_truth(seqs[0])
        if gt is None:
            raise InputError(f"sequence {seqs[0].id} has no ground truth")
        if len(gt[0]) != len(params):
            raise InputError(f"prediction has {len(params)} frames, ground truth {len(gt[0])}")
    pj, pv = zip(*[camera_joints(p, model, vertices=True) for p in params])
    pj, pv = np.stack(pj), np.stack(pv)
    lighted = np.stack([lighted_texture(p.texture, p.light, model.canonical_normals)[0] for p in params])
    shapes = np.stack([p.beta for p in params])
    qloss = sequence_quat_loss(params)
    rep = evaluate(pj, pv if gt else None, gt[0] if gt else None, gt[1] if gt else None,
                   fps=args.fps, lighted=lighted, shapes=shapes, quat_loss=qloss)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    d = rep.to_dict()
    _write_json(out / "report.json", d)
    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        for k, v in d.items():
            w.writerow([k, f"{v:.10g}"])
    if len(params) >= 2:
        _, _, per_face = consistency_sd(lighted, shapes)
        with open(out / "texture_sd.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["face", "r", "g", "b"])
            for i, row in enumerate(per_face):
                w.writerow([i] + [f"{x:.6g}" for x in row])
        _sd_preview(out / "texture_sd.pgm", params[0], per_face.mean(axis=1), doc, model)
    for k, v in d.items():
        print(f"{k:>10s} {v:.6g}")
    return EXIT_OK


def _sd_preview(path, params, sd, doc, model):
    """Heat preview: each face of the first frame coloured by its texture S.D."""
    cams = doc.get("cameras")
    cam = CameraModel.from_dict(cams[0]) if cams else CameraModel()
    dec = model.decode(params.theta, params.beta)
    mesh, _ = apply_global_transform(model.mesh(dec.vertices), dec.joints, params.scale, params.rot, params.trans)
    top = max(float(sd.max()), 1e-12)
    from .render import rasterize
    out = rasterize(mesh.vertices, model.faces, np.repeat((sd / top)[:, None], 3, axis=1), cam)
    io.write_image(path, out.color[..., 0])


# ------------------------------------------------------------------ render


def cmd_render(args) -> int:
    model = default_model()
    params, doc = _load_predictions(args.params)
    if not 0 <= args.frame < len(params):
        raise InputError(f"frame {args.frame} out of range (0..{len(params) - 1})")
    cams = doc.get("cameras")
    cam = CameraModel.from_dict(cams[args.frame]) if cams else CameraModel()
    _render_preview(args.out, params[args.frame], cam, model)
    print(f"wrote {args.out}")
    return EXIT_OK


# ------------------------------------------------------------------ weight search


def cmd_weight_search(args) -> int:
    from . import weight_search as W

    config = _config(args.config, args.seed)
    manifest = _manifest(args.manifest)
    seq = manifest.sequences[0]
    gt = _ground_truth(seq)
    if gt is None:
        raise InputError(f"sequence {seq.id} has no ground truth; the search reports joint errors")
    groups = args.groups.split(",") if args.groups else list(W.GROUP_ORDER)
    bad = set(groups) - set(L.SUB_LOSSES)
    if bad:
        raise InputError(f"unknown loss groups: {sorted(bad)}")
    trainer = W.overfit_trainer(_frames(seq), gt[0], config)
    result = W.grid_search_weights(trainer, groups, factor=args.factor,
                                   callback=lambda p: log.info("%s = %g: sum %.6g", p.group,
                                                               p.phi[p.group], p.determined_sum))
    tables = W.search_table(result)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    text = W.format_tables(tables)
    (out / "weight_search.txt").write_text(text)
    W.write_tables_csv(out / "weight_search.csv", tables)
    _write_json(out / "weights.json", result.weights.to_dict())
    print(text)
    return EXIT_OK


# ------------------------------------------------------------------ checks


def cmd_quat_check(args) -> int:
    from . import quat

    rng = np.random.default_rng(args.seed)
    a = rng.normal(size=(args.pairs, 4))
    b = rng.normal(size=(args.pairs, 4))
    a /= np.linalg.norm(a, axis=1, keepdims=True)
    b /= np.linalg.norm(b, axis=1, keepdims=True)
    got = quat.rotation_angle_between(a, b)
    rel = quat.quat_to_matrix(quat.hamilton_product(b, quat.quat_inverse(a)))
    c = np.clip((np.trace(rel, axis1=-2, axis2=-1) - 1) / 2, -1, 1)
    s = np.linalg.norm(np.stack([rel[:, 2, 1] - rel[:, 1, 2], rel[:, 0, 2] - rel[:, 2, 0],
                                 rel[:, 1, 0] - rel[:, 0, 1]], axis=1), axis=1) / 2
    err_angle = float(np.max(np.abs(got - np.arctan2(s, c))))
    t = rng.uniform(0, 1, args.pairs)
    mid = np.stack([quat.slerp(x, y, ti) for x, y, ti in zip(a, b, t)])
    err_slerp = float(np.max(np.abs(quat.rotation_angle_between(a, mid)
                                    + quat.rotation_angle_between(mid, b) - got)))
    double = bool(np.array_equal(quat.rotation_angle_between(-a, b), got)
                  and np.array_equal(quat.rotation_angle_between(a, -b), got))
    print(f"angle vs matrix trace  max error {err_angle:.3e}")
    print(f"slerp additivity       max error {err_slerp:.3e}")
    print(f"double cover           {'exact' if double else 'MISMATCH'}")
    ok = err_angle < 1e-7 and err_slerp < 1e-7 and double
    return EXIT_OK if ok else EXIT_FAIL


def cmd_grad_check(args) -> int:
    from .gradcheck import standard_suite

    worst = standard_suite(args.points, args.seed)
    ok = True
    for name, rep in worst.items():
        flag = "ok" if rep.ok else "FAIL"
        ok &= rep.ok
        print(f"{name:>16s}  max rel error {rep.max_rel_error:.3e}  at {rep.worst_index}  {flag}")
    return EXIT_OK if ok else EXIT_FAIL


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="handfit", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic demo sequence and manifest")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--frames", type=int, default=30)
    s.add_argument("--noise", type=float, default=0.005, help="keypoint noise S.D. (normalized units)")
    s.add_argument("--fps", type=float, default=30.0)
    s.add_argument("--sequence", default="synth000", help="sequence id")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("fit", help="fit every sequence of a manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--weights")
    s.add_argument("--config")
    s.add_argument("--mode", choices=("image", "video"), default="video")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("eval", help="metrics report for fitted parameters")
    s.add_argument("--pred", required=True, help="checkpoint file or fit output directory")
    s.add_argument("--manifest", help="manifest with ground truth; omit for gt-free metrics")
    s.add_argument("--sequence")
    s.add_argument("--fps", type=float, default=30.0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("render", help="render one frame of a checkpoint to PPM")
    s.add_argument("--params", required=True)
    s.add_argument("--frame", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("weight-search", help="greedy power-of-ten loss weight selection")
    s.add_argument("--manifest", required=True)
    s.add_argument("--config")
    s.add_argument("--groups", help="comma-separated loss groups in search order")
    s.add_argument("--factor", type=float, default=10.0)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_weight_search)

    s = sub.add_parser("quat-check", help="quaternion identity checks")
    s.add_argument("--pairs", type=int, default=10000)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_quat_check)

    s = sub.add_parser("grad-check", help="finite-difference checks of the analytic gradients")
    s.add_argument("--points", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_grad_check)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
