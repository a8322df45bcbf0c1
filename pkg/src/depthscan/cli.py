"""Command-line front end: ``depthscan <subcommand> ...``.

Exit codes: 0 success, 1 numerical failure, 2 usage or input errors.
Diagnostics go to stderr; data goes to files or stdout.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from . import io as dio
from .geometry import Camera, ContractError, DepthMap, delta_normals
from .integrate import (
    IntegratorConfig,
    SingularNormalsError,
    integrate_depth,
    poisson_integrate_ortho,
    relative_rms_after_scale,
)
from .losses import EmptyDomainError
from .meshing import (
    DEFAULT_DISCONTINUITY,
    InvariantError,
    ScanPair,
    TriangleMesh,
    fuse_scan,
    scale_to_height,
    triangulate_depth,
    vertical_extent,
)
from .metrics import (
    EmptyMeshError,
    NonConvergenceError,
    apply_fit,
    bidirectional_error,
    fit_similarity,
    format_report,
)
from .synth import KINDS, SyntheticScene, render_depth_gt

log = logging.getLogger("depthscan")

MANIFEST_VERSION = 1


class UsageError(Exception):
    pass


class NumericalFailure(Exception):
    pass


def _camera(args, shape, from_file: Camera | None) -> Camera:
    """Camera from explicit flags, else the file header, else the default focal."""
    h, w = shape
    if from_file is not None and args.focal is None and args.cx is None and args.cy is None:
        return from_file
    base = from_file or Camera.centered(args.focal or Camera.default().focal_px, w, h)
    return Camera(
        args.focal if args.focal is not None else base.focal_px,
        args.cx if args.cx is not None else base.cx,
        args.cy if args.cy is not None else base.cy,
        w,
        h,
    )


def _add_camera_flags(p):
    g = p.add_argument_group("camera (defaults to the input file header)")
    g.add_argument("--focal", type=float, help="focal length in pixels")
    g.add_argument("--cx", type=float, help="principal point column")
    g.add_argument("--cy", type=float, help="principal point row")


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------- synth


def cmd_synth(args):
    if args.width < 2 or args.height < 2 or not args.focal > 0:
        raise UsageError("--width/--height must be >= 2 and --focal positive")
    cam = Camera.centered(args.focal, args.width, args.height)
    rng = np.random.default_rng(args.seed)
    if args.random_placement:
        scene = SyntheticScene.random(args.kind, rng)
    else:
        scene = SyntheticScene(args.kind)
    front, back, normals = render_depth_gt(scene, cam)
    # what lands on disk is float32; derive everything else from that
    front = DepthMap(front.values.astype(np.float32).astype(np.float64), front.mask)
    back = DepthMap(back.values.astype(np.float32).astype(np.float64), back.mask)

    out = args.out_dir
    os.makedirs(out, exist_ok=True)
    files = {
        "front_depth": "front_depth.pfm",
        "front_mask": "front_mask.pgm",
        "back_depth": "back_depth.pfm",
        "back_mask": "back_mask.pgm",
        "front_normals": "front_normals.pfm",
    }
    dio.write_depth(os.path.join(out, files["front_depth"]), front, cam)
    dio.write_pgm(os.path.join(out, files["front_mask"]), front.mask)
    dio.write_depth(os.path.join(out, files["back_depth"]), back, cam)
    dio.write_pgm(os.path.join(out, files["back_mask"]), back.mask)
    dio.write_normals(os.path.join(out, files["front_normals"]), normals, cam)

    height = _scan_height(front, back, cam)
    manifest = {
        "version": MANIFEST_VERSION,
        "seed": args.seed,
        "camera": cam.to_dict(),
        "scene": scene.to_dict(),
        "files": files,
        "valid_pixels": {"front": int(front.mask.sum()), "back": int(back.mask.sum())},
        "height": height,
        "units": "meters",
    }
    _write_json(os.path.join(out, "manifest.json"), manifest)
    return 0


def _scan_height(front: DepthMap, back: DepthMap, cam: Camera) -> float:
    """Vertical extent of the mesh ``depth2mesh`` builds from these maps."""
    fm = triangulate_depth(front, cam)
    bm = triangulate_depth(back, cam)
    v = np.concatenate([fm.vertices, bm.vertices])
    if len(v) == 0:
        return 0.0
    return vertical_extent(TriangleMesh(v, np.zeros((0, 3), dtype=np.int64)))


# ---------------------------------------------------------------- depth2normals


def cmd_depth2normals(args):
    depth, file_cam = dio.read_depth(args.depth, args.mask)
    cam = _camera(args, depth.shape, file_cam)
    normals = delta_normals(depth, cam)
    dio.write_normals(args.output, normals, cam)
    return 0


# ---------------------------------------------------------------- normals2depth


def cmd_normals2depth(args):
    normals, file_cam = dio.read_normals(args.normals, args.mask)
    cam = _camera(args, normals.shape, file_cam)
    mask = normals.mask

    if args.method == "poisson":
        if args.anchor is not None or args.anchor_pixel is not None:
            raise UsageError("--anchor/--anchor-pixel are only used by --method gd")
        relief = poisson_integrate_ortho(normals, mask, args.pixel_pitch)
        depth = relief.as_depth(args.anchor_depth if args.anchor_depth is not None else args.init_depth)
        if not np.all(depth.values[mask] > 0):
            raise NumericalFailure("orthographic relief reaches non-positive depth; raise --anchor-depth")
        converged, summary = True, "method=poisson"
    else:
        anchor = _resolve_anchor(args, mask)
        cfg = IntegratorConfig(
            max_iters=args.max_iters,
            step_size=args.step_size,
            init_depth=args.init_depth,
            anchor=anchor,
        )
        res = integrate_depth(normals, mask, cam, cfg)
        depth = res.depth
        converged = res.converged
        summary = (
            f"method=gd iterations={res.iterations} converged={str(res.converged).lower()} "
            f"l1_normals={res.loss:.6e} components={res.n_components}"
        )

    dio.write_depth(args.output, depth, cam)
    if args.reference:
        ref, _ = dio.read_depth(args.reference, args.reference_mask)
        summary += f" rms_after_scale={relative_rms_after_scale(depth, ref):.6e}"
    print(summary)
    if not converged:
        raise NumericalFailure(f"integration did not converge in {args.max_iters} iterations")
    return 0


def _resolve_anchor(args, mask):
    """``((u, v), depth)`` or None. ``--anchor`` reads depth from a PFM."""
    if args.anchor is None and args.anchor_depth is None:
        if args.anchor_pixel is not None:
            raise UsageError("--anchor-pixel needs --anchor or --anchor-depth")
        return None
    if args.anchor is not None and args.anchor_depth is not None:
        raise UsageError("--anchor and --anchor-depth are mutually exclusive")
    if args.anchor_pixel is not None:
        u, v = args.anchor_pixel
    else:
        rows, cols = np.nonzero(mask)
        if len(rows) == 0:
            raise EmptyDomainError("normal map has no valid pixel")
        d2 = (rows - rows.mean()) ** 2 + (cols - cols.mean()) ** 2
        k = int(np.argmin(d2))
        v, u = int(rows[k]), int(cols[k])
    h, w = mask.shape
    if not (0 <= u < w and 0 <= v < h) or not mask[v, u]:
        raise UsageError(f"anchor pixel (u={u}, v={v}) is not a valid pixel")
    if args.anchor is not None:
        ref, _ = dio.read_depth(args.anchor)
        if ref.shape != mask.shape or not ref.mask[v, u]:
            raise UsageError(f"{args.anchor} has no valid depth at (u={u}, v={v})")
        d = float(ref.values[v, u])
    else:
        d = args.anchor_depth
        if not d > 0:
            raise UsageError("--anchor-depth must be positive")
    return (u, v), d


# ---------------------------------------------------------------- depth2mesh


def cmd_depth2mesh(args):
    front, cam_f = dio.read_depth(args.front, args.front_mask)
    cam = _camera(args, front.shape, cam_f)
    if args.back:
        back, _ = dio.read_depth(args.back, args.back_mask)
        mesh = fuse_scan(ScanPair(front, back, cam), args.discontinuity)
    else:
        if args.back_mask:
            raise UsageError("--back-mask given without --back")
        mesh = triangulate_depth(front, cam, args.discontinuity)
    if args.scale_to_height is not None:
        mesh, factor = scale_to_height(mesh, args.scale_to_height)
        print(f"scale_factor={factor!r}")
    dio.write_mesh(args.output, mesh)
    print(f"vertices={mesh.n_vertices} triangles={mesh.n_triangles} height={vertical_extent(mesh)!r}")
    return 0


# ---------------------------------------------------------------- eval


def _read_table(path):
    """Long-format CSV ``subject,variant,error_mm`` into ordered rows/variants."""
    rows, variants = {}, []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for lineno, rec in enumerate(reader, 1):
            if not rec or rec[0].startswith("#") or (lineno == 1 and rec[0] == "subject"):
                continue
            if len(rec) != 3:
                raise UsageError(f"{path}:{lineno}: expected subject,variant,error_mm")
            sid, variant, val = rec
            try:
                rows.setdefault(sid, {})[variant] = float(val)
            except ValueError:
                raise UsageError(f"{path}:{lineno}: bad error value {val!r}") from None
            if variant not in variants:
                variants.append(variant)
    return rows, variants


def cmd_eval(args):
    rows, variants = ({}, [])
    if args.table:
        rows, variants = _read_table(args.table)
    if (args.scan is None) != (args.reference is None):
        raise UsageError("eval needs both SCAN and REFERENCE meshes, or neither with --table")
    if args.scan is None and not args.table:
        raise UsageError("nothing to evaluate: give SCAN REFERENCE and/or --table")

    if args.scan is not None:
        scan = dio.read_mesh(args.scan)
        ref = dio.read_mesh(args.reference)
        if args.fit != "none":
            opt_back = args.fit == "opt_back"
            try:
                fit = fit_similarity(scan, ref, opt_back=opt_back)
            except NonConvergenceError as exc:
                print(f"depthscan: {exc}; best error {exc.best_fit.final_error:.4f} mm", file=sys.stderr)
                return 1
            scan = apply_fit(scan, fit)
            back = "" if fit.back_scale is None else f" back_scale={fit.back_scale!r}"
            print(
                f"depthscan: fit translation={fit.translation.tolist()!r} scale={fit.scale!r}{back}",
                file=sys.stderr,
            )
        err = bidirectional_error(scan, ref, weight_by_count=args.weight_by_count)
        variant = args.variant
        rows.setdefault(args.subject, {})[variant] = err
        if variant not in variants:
            variants.append(variant)
        if args.append_csv:
            new = not os.path.exists(args.append_csv) or os.path.getsize(args.append_csv) == 0
            with open(args.append_csv, "a", newline="") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                if new:
                    writer.writerow(["subject", "variant", "error_mm"])
                writer.writerow([args.subject, variant, f"{err:.6f}"])
        print(f"{err:.2f} mm")

    ordered = [(sid, rows[sid]) for sid in rows]
    sys.stdout.write(format_report(ordered, variants, args.format))
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="depthscan",
        description="Depth/normal map geometry: synthesize, differentiate, integrate, mesh, evaluate.",
    )
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging on stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", required=True)

    s = sub.add_parser("synth", help="render analytic ground-truth depth/normal maps")
    s.add_argument("--kind", required=True, choices=KINDS)
    s.add_argument("--seed", type=int, default=0, help="64-bit seed for random placement")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--width", type=int, default=Camera.default().width)
    s.add_argument("--height", type=int, default=Camera.default().height)
    s.add_argument("--focal", type=float, default=Camera.default().focal_px, help="focal length in pixels")
    s.add_argument("--random-placement", action="store_true",
                   help="draw the scene placement from the randomized camera ranges")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("depth2normals", help="normals of a depth map")
    s.add_argument("depth", help="depth PFM")
    s.add_argument("--mask", help="PGM mask (default: depth > 0)")
    s.add_argument("-o", "--output", required=True, help="normal PFM to write")
    _add_camera_flags(s)
    s.set_defaults(func=cmd_depth2normals)

    s = sub.add_parser("normals2depth", help="recover depth (up to scale) from normals")
    s.add_argument("normals", help="3-channel normal PFM")
    s.add_argument("--mask", help="PGM mask (default: pixels not equal to (0, 0, -1))")
    s.add_argument("-o", "--output", required=True, help="depth PFM to write")
    s.add_argument("--method", choices=("gd", "poisson"), default="gd")
    s.add_argument("--anchor", metavar="DEPTH_PFM", help="take the anchor depth from this depth map")
    s.add_argument("--anchor-pixel", type=int, nargs=2, metavar=("U", "V"),
                   help="anchor pixel (column, row); default the mask centroid pixel")
    s.add_argument("--anchor-depth", type=float, help="anchor depth in meters")
    s.add_argument("--init-depth", type=float, default=IntegratorConfig.init_depth)
    s.add_argument("--max-iters", type=int, default=IntegratorConfig.max_iters)
    s.add_argument("--step-size", type=float, default=IntegratorConfig.step_size)
    s.add_argument("--pixel-pitch", type=float, default=1e-3, help="meters per pixel for --method poisson")
    s.add_argument("--reference", metavar="DEPTH_PFM", help="report rms-after-scale against this depth")
    s.add_argument("--reference-mask", help="PGM mask for --reference")
    _add_camera_flags(s)
    s.set_defaults(func=cmd_normals2depth)

    s = sub.add_parser("depth2mesh", help="triangulate depth maps into a mesh")
    s.add_argument("--front", required=True, help="front depth PFM")
    s.add_argument("--front-mask")
    s.add_argument("--back", help="back depth PFM")
    s.add_argument("--back-mask")
    s.add_argument("-o", "--output", required=True, help=".ply or .obj")
    s.add_argument("--discontinuity", type=float, default=DEFAULT_DISCONTINUITY,
                   help="max depth ratio minus one inside a quad")
    s.add_argument("--scale-to-height", type=float, metavar="METERS")
    _add_camera_flags(s)
    s.set_defaults(func=cmd_depth2mesh)

    s = sub.add_parser("eval", help="bidirectional mesh-to-mesh error in mm")
    s.add_argument("scan", nargs="?", help="scan mesh (.ply/.obj)")
    s.add_argument("reference", nargs="?", help="reference mesh (.ply/.obj)")
    s.add_argument("--fit", choices=("none", "similarity", "opt_back"), default="none")
    s.add_argument("--subject", default="scan", help="row label in the report")
    s.add_argument("--variant", default="baseline", help="column label in the report")
    s.add_argument("--weight-by-count", action="store_true",
                   help="pool both directions instead of averaging the two means")
    s.add_argument("--table", metavar="CSV", help="prior results (subject,variant,error_mm) to include")
    s.add_argument("--append-csv", metavar="CSV", help="append this result to a results CSV")
    s.add_argument("--format", choices=("text", "csv"), default="text")
    s.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="depthscan: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except (NumericalFailure, NonConvergenceError, SingularNormalsError, FloatingPointError) as exc:
        print(f"depthscan: numerical failure: {exc}", file=sys.stderr)
        return 1
    except (UsageError, ContractError, dio.FormatError, InvariantError, EmptyDomainError, EmptyMeshError, OSError) as exc:
        print(f"depthscan: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
