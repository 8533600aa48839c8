"""Command-line entry point: mosaic, train, detect, match, eval.

Every command accepts ``--config FILE`` (key=value lines) and any number of
``--key=value`` overrides for the keys of :class:`TrainConfig`. The merged
configuration is echoed into ``manifest.txt`` in the output directory.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure.
"""
from __future__ import annotations

import argparse
import logging
import shlex
import sys
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from . import evalmatch as E
from . import geometry as G
from .bayer import BayerImage, load_pgm, mosaic, save_pgm
from .network import CheckpointError, load_checkpoint
from .synthetic import generate_synthetic
from .tensor import ConfigurationError, DimensionError
from .train import TrainConfig, TrainingDiverged, make_network, parse_key_values, train_descriptor, train_detector

log = logging.getLogger("bayernet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
IMAGE_SUFFIXES = {".png", ".ppm", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".pgm"}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ------------------------------------------------------------------ config


def resolve_config(config_path: str | None, overrides: list[str]) -> TrainConfig:
    items: dict[str, str] = {}
    if config_path:
        try:
            items.update(parse_key_values(Path(config_path).read_text()))
        except OSError as exc:
            raise UsageError(f"cannot read config {config_path}: {exc}") from exc
    for token in overrides:
        if not token.startswith("--") or "=" not in token:
            raise UsageError(f"unrecognised argument {token!r} (overrides look like --key=value)")
        key, _, value = token[2:].partition("=")
        items[key.replace("-", "_")] = value
    try:
        return TrainConfig().with_overrides(items)
    except ConfigurationError as exc:
        raise UsageError(str(exc)) from exc


def write_manifest(out_dir: Path, argv: list[str], config: TrainConfig, extra: list[str] | None = None) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = ["# bayernet run manifest", "command=" + " ".join(shlex.quote(a) for a in argv)]
    lines += extra or []
    text = "\n".join(lines) + "\n" + config.to_text()
    (out_dir / "manifest.txt").write_text(text)


# --------------------------------------------------------------- image io


def load_rgb(path: Path) -> np.ndarray:
    """``[3, H, W]`` float32 in [0, 1]; odd dimensions lose their last row/column."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    h, w = arr.shape[:2]
    arr = arr[: h - h % 2, : w - w % 2]
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def load_raw(path: Path) -> BayerImage:
    """A raw image from a PGM, a single-channel image, or an RGB image (mosaiced)."""
    path = Path(path)
    try:
        if path.suffix.lower() == ".pgm":
            return load_pgm(path)
        with Image.open(path) as im:
            if im.mode in ("L", "I;16", "I;16B", "I"):
                arr = np.asarray(im, dtype=np.float64)
                peak = 255.0 if im.mode == "L" else 65535.0
                h, w = arr.shape
                return BayerImage(arr[: h - h % 2, : w - w % 2] / peak)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    return mosaic(load_rgb(path))


def _require_multiple_of_8(img: BayerImage, path) -> None:
    h, w = img.shape
    if h % 8 or w % 8:
        raise DataError(f"{path}: height and width must be divisible by 8, got {h}x{w}")


def _fit_rgb(rgb: np.ndarray, max_side: int) -> tuple[np.ndarray, np.ndarray]:
    """Resize (if ``max_side``) and crop to multiples of 8; returns the image and
    the affine map from original to new pixel coordinates."""
    _, h, w = rgb.shape
    a = np.eye(3)
    if max_side and max(h, w) > max_side:
        s = max_side / max(h, w)
        nw, nh = max(8, int(round(w * s))), max(8, int(round(h * s)))
        im = Image.fromarray(np.round(rgb.transpose(1, 2, 0) * 255).astype(np.uint8)).resize(
            (nw, nh), Image.BILINEAR
        )
        rgb = np.asarray(im, dtype=np.float32).transpose(2, 0, 1) / 255.0
        sx, sy = nw / w, nh / h
        # pixel centres: x' + 0.5 = (x + 0.5) * s
        a = np.array([[sx, 0, 0.5 * sx - 0.5], [0, sy, 0.5 * sy - 0.5], [0, 0, 1.0]])
        h, w = nh, nw
    # cropping the bottom/right keeps coordinates unchanged
    rgb = rgb[:, : h - h % 8, : w - w % 8]
    return np.ascontiguousarray(rgb, dtype=np.float32), a


def save_keypoints(path: Path, kps: E.Keypoints) -> None:
    path.write_text(kps.to_text())


def save_descriptors(path: Path, desc: np.ndarray) -> None:
    """``K x D`` little-endian float32, no header (an empty file for K = 0)."""
    path.write_bytes(np.ascontiguousarray(desc, dtype="<f4").tobytes())


def load_descriptors(path: Path, dim: int) -> np.ndarray:
    return np.frombuffer(Path(path).read_bytes(), dtype="<f4").reshape(-1, dim)


def _gray_u8(img: BayerImage) -> np.ndarray:
    return np.round(np.clip(img.data, 0, 1) * 255).astype(np.uint8)


def draw_matches(path: Path, a: BayerImage, b: BayerImage, pair: E.PairData, eps: float) -> None:
    """Side-by-side raw images with match lines: green correct, red incorrect."""
    ga, gb = _gray_u8(a), _gray_u8(b)
    h = max(ga.shape[0], gb.shape[0])
    canvas = np.zeros((h, ga.shape[1] + gb.shape[1]), dtype=np.uint8)
    canvas[: ga.shape[0], : ga.shape[1]] = ga
    canvas[: gb.shape[0], ga.shape[1] :] = gb
    im = Image.fromarray(canvas).convert("RGB")
    draw = ImageDraw.Draw(im)
    m = E.match_bruteforce(pair.desc_a, pair.desc_b)
    if len(m):
        src = pair.kps_a.xy[m.pairs[:, 0]].astype(np.float64)
        dst = pair.kps_b.xy[m.pairs[:, 1]].astype(np.float64)
        err = np.linalg.norm(G.project_points(src, pair.h_true) - dst, axis=1)
        for (x0, y0), (x1, y1), e in zip(src, dst, err):
            color = (0, 200, 0) if e < eps else (220, 0, 0)
            draw.line([(x0, y0), (x1 + ga.shape[1], y1)], fill=color, width=1)
    im.save(path)


# ---------------------------------------------------------------- commands


def _load_net(path: str | None):
    if path is None:
        raise UsageError("--checkpoint is required")
    try:
        return load_checkpoint(Path(path).read_bytes())
    except OSError as exc:
        raise UsageError(f"cannot read checkpoint {path}: {exc}") from exc
    except CheckpointError as exc:
        raise DataError(f"{path}: {exc}") from exc


def cmd_mosaic(args, config: TrainConfig, argv) -> int:
    src, out = Path(args.input_dir), Path(args.output_dir)
    if not src.is_dir():
        raise DataError(f"{src} is not a directory")
    files = sorted(p for p in src.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES and p.suffix.lower() != ".pgm")
    if not files:
        raise DataError(f"no RGB images found in {src}")
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for f in files:
        try:
            raw = mosaic(load_rgb(f))
        except DataError as exc:
            log.warning("skipping %s", exc)
            continue
        dst = out / (f.stem + ".pgm")
        save_pgm(dst, raw)
        written.append(f"map={f.name} -> {dst.name}")
    if not written:
        raise DataError(f"none of the {len(files)} images in {src} could be read")
    write_manifest(out, argv, config, written)
    print(f"wrote {len(written)} raw images to {out}")
    return EXIT_OK


def cmd_train(args, config: TrainConfig, argv) -> int:
    out = Path(args.output_dir)
    if args.phase == "descriptor" and args.checkpoint is None:
        raise UsageError("the descriptor phase needs --checkpoint from a detector run")
    net = _load_net(args.checkpoint) if args.checkpoint else make_network(config)
    count = config.train_samples if args.phase == "detector" else config.train_pairs
    data = generate_synthetic(config.seed, count, config.image_size, config.max_shapes, config.noise_std)
    write_manifest(out, argv, config, [f"phase={args.phase}", f"init_checkpoint={args.checkpoint or ''}"])
    run = train_detector if args.phase == "detector" else train_descriptor
    try:
        result = run(net, data, config, log_path=out / "train_log.tsv")
    except TrainingDiverged as exc:
        (out / "checkpoint.bin").write_bytes(exc.checkpoint)
        log.error("%s", exc)
        return EXIT_NUMERIC
    (out / "checkpoint.bin").write_bytes(result.checkpoint)
    if args.phase == "detector":
        print(f"bce {result.initial_bce:.4f} -> {result.final_bce:.4f}")
    print(f"checkpoint written to {out / 'checkpoint.bin'}")
    return EXIT_OK


def cmd_detect(args, config: TrainConfig, argv) -> int:
    net = _load_net(args.checkpoint)
    out = Path(args.output_dir)
    img = load_raw(Path(args.image))
    _require_multiple_of_8(img, args.image)
    kps, desc = E.detect_and_describe(net.infer, img, config.threshold, config.nms_radius, config.max_keypoints)
    write_manifest(
        out,
        argv,
        config,
        [f"image={args.image}", f"checkpoint={args.checkpoint}", f"descriptor_dim={net.config.descriptor_dim}"],
    )
    stem = Path(args.image).stem
    save_keypoints(out / f"{stem}.kps.txt", kps)
    save_descriptors(out / f"{stem}.desc.bin", desc.reshape(len(kps), net.config.descriptor_dim))
    print(f"{len(kps)} keypoints")
    return EXIT_OK


def cmd_match(args, config: TrainConfig, argv) -> int:
    net = _load_net(args.checkpoint)
    out = Path(args.output_dir)
    a, b = load_raw(Path(args.image_a)), load_raw(Path(args.image_b))
    _require_multiple_of_8(a, args.image_a)
    _require_multiple_of_8(b, args.image_b)
    h = np.eye(3)
    if args.homography:
        try:
            h = G.load_homography(args.homography)
        except (OSError, ValueError) as exc:
            raise DataError(str(exc)) from exc
    kw = dict(threshold=config.threshold, nms_radius=config.nms_radius, max_keypoints=config.max_keypoints)
    pair = E.make_pair(net.infer, a, b, h, **kw)
    m = E.match_bruteforce(pair.desc_a, pair.desc_b)
    write_manifest(out, argv, config, [f"checkpoint={args.checkpoint}"])
    lines = []
    for (i, j), d in zip(m.pairs, m.distances):
        (xa, ya), (xb, yb) = pair.kps_a.xy[i], pair.kps_b.xy[j]
        lines.append(f"{xa} {ya} {xb} {yb} {d:.6f}\n")
    (out / "matches.txt").write_text("".join(lines))
    draw_matches(out / "matches.png", a, b, pair, config.eps_homography)
    print(f"{len(m)} matches")
    return EXIT_OK


def _scene_images(scene: Path) -> dict[int, Path]:
    found = {}
    for p in scene.iterdir():
        if p.suffix.lower() in IMAGE_SUFFIXES and p.stem.isdigit():
            found[int(p.stem)] = p
    return found


def _scene_pairs(scene: Path, config: TrainConfig, net):
    """PairData for (1, k) of one scene, images resized/cropped to multiples of 8."""
    images = _scene_images(scene)
    if 1 not in images:
        raise DataError(f"{scene}: no reference image 1")
    rgb1, a1 = _fit_rgb(load_rgb(images[1]), config.eval_max_side)
    raw1 = mosaic(rgb1)
    pairs, raws = [], []
    for k in sorted(images):
        if k == 1:
            continue
        hfile = scene / f"H_1_{k}"
        if not hfile.exists():
            raise DataError(f"{scene}: missing homography file {hfile.name}")
        try:
            h = G.load_homography(hfile)
            G.inverse(h)
        except (ValueError, np.linalg.LinAlgError) as exc:
            raise DataError(f"{scene}: malformed homography {hfile.name}: {exc}") from exc
        rgbk, ak = _fit_rgb(load_rgb(images[k]), config.eval_max_side)
        rawk = mosaic(rgbk)
        h_adj = G.compose(ak, h, G.inverse(a1))
        kw = dict(threshold=config.threshold, nms_radius=config.nms_radius, max_keypoints=config.max_keypoints)
        pairs.append(E.make_pair(net.infer, raw1, rawk, h_adj, name=f"{scene.name}/1-{k}", **kw))
        raws.append((raw1, rawk))
    return pairs, raws, rgb1


def cmd_eval(args, config: TrainConfig, argv) -> int:
    net = _load_net(args.checkpoint)
    root, out = Path(args.dataset_dir), Path(args.output_dir)
    if not root.is_dir():
        raise DataError(f"{root} is not a directory")
    scenes = sorted(p for p in root.iterdir() if p.is_dir())
    if not scenes:
        raise DataError(f"no scene directories in {root}")
    (out / "vis").mkdir(parents=True, exist_ok=True)
    write_manifest(out, argv, config, [f"task={args.task}", f"dataset={root}", f"checkpoint={args.checkpoint}"])
    eps, eps_rep = config.eps_homography, config.eps_repeatability
    all_pairs: list[E.PairMetrics] = []
    done = 0
    for scene in scenes:
        try:
            if args.task == "invariance":
                images = _scene_images(scene)
                if 1 not in images:
                    raise DataError(f"{scene}: no reference image 1")
                rgb1, _ = _fit_rgb(load_rgb(images[1]), config.eval_max_side)
                kw = dict(threshold=config.threshold, nms_radius=config.nms_radius, max_keypoints=config.max_keypoints)
                reports = E.invariance_suite(net.infer, [rgb1], seed=config.seed, eps=eps, **kw)
                metrics = []
                for family, rep in reports.items():
                    for p in rep.pairs:
                        p.name = f"{scene.name}/{family.value}"
                        metrics.append(p)
            else:
                pairs, raws, _ = _scene_pairs(scene, config, net)
                metrics = [
                    E.evaluate_pair(p, eps, eps_rep, ransac_iters=config.ransac_iters, seed=config.seed + i)
                    for i, p in enumerate(pairs)
                ]
                for p, (ra, rb) in zip(pairs, raws):
                    draw_matches(out / "vis" / (p.name.replace("/", "_") + ".png"), ra, rb, p, eps)
        except DataError as exc:
            log.warning("skipping scene: %s", exc)
            continue
        report = E.aggregate(metrics, eps, eps_rep)
        (out / f"{scene.name}.csv").write_text(E.report_csv(report, summary_name=None))
        all_pairs.extend(metrics)
        done += 1
    if done == 0:
        raise DataError(f"every scene under {root} was skipped")
    total = E.aggregate(all_pairs, eps, eps_rep)
    (out / "aggregate.csv").write_text(E.report_csv(total))
    print(E.report_table(total, f"{args.task}: {done} scenes, {len(all_pairs)} pairs"))
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bayernet", description="Keypoints and descriptors on raw Bayer images.")
    parser.add_argument("--config", help="key=value configuration file")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("mosaic", help="convert RGB images to 16-bit RGGB PGM files")
    p.add_argument("input_dir")
    p.add_argument("output_dir")

    p = sub.add_parser("train", help="train the detector or the descriptor on synthetic shapes")
    p.add_argument("phase", choices=["detector", "descriptor"])
    p.add_argument("output_dir")
    p.add_argument("--checkpoint", help="initial parameters (required for the descriptor phase)")

    p = sub.add_parser("detect", help="keypoints and descriptors for one image")
    p.add_argument("image")
    p.add_argument("output_dir")
    p.add_argument("--checkpoint")

    p = sub.add_parser("match", help="match two images and draw the result")
    p.add_argument("image_a")
    p.add_argument("image_b")
    p.add_argument("output_dir")
    p.add_argument("--checkpoint")
    p.add_argument("--homography", help="ground-truth homography (9 numbers) to colour matches")

    p = sub.add_parser("eval", help="evaluate on a directory of scenes (1.png ... n.png + H_1_k)")
    p.add_argument("task", choices=["repeatability", "homography", "invariance"])
    p.add_argument("dataset_dir")
    p.add_argument("output_dir")
    p.add_argument("--checkpoint")
    return parser


COMMANDS = {"mosaic": cmd_mosaic, "train": cmd_train, "detect": cmd_detect, "match": cmd_match, "eval": cmd_eval}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        # options of the form --key=value that argparse does not know are config overrides
        known, overrides = [], []
        for a in argv:
            is_override = a.startswith("--") and "=" in a and a.split("=")[0] not in _FLAGS
            (overrides if is_override else known).append(a)
        args = parser.parse_args(known)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        config = resolve_config(args.config, overrides)
        return COMMANDS[args.command](args, config, ["bayernet"] + argv)
    except UsageError as exc:
        print(f"bayernet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, DimensionError) as exc:
        print(f"bayernet: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as exc:
        print(f"bayernet: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


_FLAGS = {"--config", "--checkpoint", "--homography", "--verbose"}


if __name__ == "__main__":
    sys.exit(main())
