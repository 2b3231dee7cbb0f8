"""``skelkit`` command line: synth, contract, skeletonize, skin, render, refine, eval, export."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .contraction import ContractionConfig, ContractionError, connectivity_surgery, contract
from .evaluation import evaluate
from .geometry import MeshError, load_mesh, save_mesh
from .kinematics import DegeneratePartError, SingularBlendError, blend_skin, load_poses, save_poses
from .losses import LossWeights
from .refine import FrameData, RefineConfig, sios2
from .rendering import (
    Camera,
    flow_from_correspondence,
    load_flow,
    load_pgm,
    rasterize_silhouette,
    save_flow,
    save_pgm,
)
from .skeleton import SchemaError, load_skeleton, save_skeleton, skeleton_from_graph, skeleton_to_json
from .skinning import SkinningWeights, compute_skinning_weights, load_weights, one_hot_parts, rigidity_coefficients, save_weights
from .synth import NoiseSpec, SynthError, SynthSpec, corrupt, generate, preset

log = logging.getLogger("skelkit")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3
SEED_ENV = "SKELKIT_SEED"


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------- configuration


@dataclass
class SkinningConfig:
    temperature: float = 1.0
    lam: float = 0.1

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigError("skinning.temperature must be positive")
        if not self.lam > 0:
            raise ConfigError("skinning.lam must be positive")


@dataclass
class RunConfig:
    seed: int = 0
    log_level: str = "WARNING"
    contraction: ContractionConfig = field(default_factory=ContractionConfig)
    skinning: SkinningConfig = field(default_factory=SkinningConfig)
    refine: dict = field(default_factory=dict)

    def refine_config(self) -> RefineConfig:
        return _build(
            RefineConfig,
            self.refine,
            "refine",
            seed=self.seed,
            temperature=self.skinning.temperature,
            lam=self.skinning.lam,
            contraction=self.contraction,
        )


_NESTED = {"losses": LossWeights}
# keys of RefineConfig that are owned by other sections
_OWNED = {"seed", "temperature", "lam", "contraction"}


def _build(cls, doc, where: str, **fixed):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)} - set(fixed)
    unknown = sorted(set(doc) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kw = dict(doc)
    for k, sub in _NESTED.items():
        if k in kw and k in names:
            kw[k] = _build(sub, kw[k], f"{where}.{k}")
    try:
        return cls(**kw, **fixed)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def load_config(path=None, seed: int | None = None) -> RunConfig:
    """Read a JSON run config; ``SKELKIT_SEED`` beats ``seed`` beats the file."""
    doc = {}
    if path is not None:
        doc = _read_json(path)
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
    allowed = {"seed", "log_level", "contraction", "skinning", "refine"}
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise ConfigError(f"unknown config key(s) {', '.join(unknown)}")
    refine_doc = doc.get("refine", {})
    if not isinstance(refine_doc, dict):
        raise ConfigError("refine: expected an object")
    bad = sorted(set(refine_doc) & _OWNED)
    if bad:
        raise ConfigError(f"refine: unknown key(s) {', '.join(bad)}")
    cfg = RunConfig(
        seed=doc.get("seed", 0),
        log_level=doc.get("log_level", "WARNING"),
        contraction=_build(ContractionConfig, doc.get("contraction", {}), "contraction"),
        skinning=_build(SkinningConfig, doc.get("skinning", {}), "skinning"),
        refine=refine_doc,
    )
    if seed is not None:
        cfg.seed = seed
    env = os.environ.get(SEED_ENV)
    if env is not None and env.strip():
        try:
            cfg.seed = int(env)
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}") from exc
    if not isinstance(cfg.seed, int) or isinstance(cfg.seed, bool) or cfg.seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    _check_level(cfg.log_level)
    cfg.refine_config()
    return cfg


def _check_level(level) -> None:
    if not isinstance(level, str) or level.upper() not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
        raise ConfigError(f"unknown log level {level!r}")


def _read_json(path):
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(str(p))
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: malformed JSON ({exc})") from exc


def _write_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def synth_spec_from_json(doc: dict, seed: int | None = None) -> tuple[SynthSpec, NoiseSpec | None]:
    """``{"preset": name, ...overrides}`` or explicit SynthSpec fields, plus optional ``noise``."""
    if not isinstance(doc, dict):
        raise ConfigError("synth spec must be a JSON object")
    doc = dict(doc)
    noise = None
    if "noise" in doc:
        noise = _build(NoiseSpec, doc.pop("noise"), "noise")
    names = {f.name for f in dataclasses.fields(SynthSpec)}
    name = doc.pop("preset", None)
    unknown = sorted(set(doc) - names)
    if unknown:
        raise ConfigError(f"synth spec: unknown key(s) {', '.join(unknown)}")
    for k in ("angles", "starts", "ends", "root_angles", "root_translation"):
        if doc.get(k) is not None:
            doc[k] = np.asarray(doc[k], dtype=np.float64)
    if seed is not None:
        doc["seed"] = seed
    try:
        spec = preset(name, **doc) if name is not None else SynthSpec(**doc)
    except TypeError as exc:
        raise ConfigError(f"synth spec: {exc}") from exc
    return spec, noise


# --------------------------------------------------------------------------- dataset and run folders


def _frame_name(t: int) -> str:
    return f"{t:04d}"


def write_dataset(out: Path, spec: SynthSpec, mesh, gt) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "frames").mkdir(exist_ok=True)
    (out / "flows").mkdir(exist_ok=True)
    save_mesh(mesh, out / "mesh.obj")
    save_skeleton(gt.skeleton, out / "gt_skeleton.json")
    save_weights(SkinningWeights(gt.onehot()), out / "gt_weights.bin")
    save_poses(gt.poses, out / "poses.json")
    _write_json(out / "targets.json", {"frames": gt.positions.tolist()})
    _write_json(out / "cameras.json", [c.to_json() for c in gt.cameras])
    starts, ends = spec.segment_points()
    _write_json(out / "segments.json", {"starts": starts.tolist(), "ends": ends.tolist()})
    for t, s in enumerate(gt.silhouettes):
        save_pgm(s, out / "frames" / f"{_frame_name(t)}.pgm")
    for t, f in enumerate(gt.flows):
        save_flow(f, out / "flows" / f"{_frame_name(t)}.bin")
    manifest = {
        "targets": "targets.json",
        "cameras": "cameras.json",
        "silhouettes": [f"frames/{_frame_name(t)}.pgm" for t in range(len(gt.silhouettes))],
        "flows": [f"flows/{_frame_name(t)}.bin" for t in range(len(gt.flows))],
    }
    _write_json(out / "frames.json", manifest)


@dataclass
class Dataset:
    mesh: object
    skeleton: object
    labels: np.ndarray
    poses: list
    targets: np.ndarray
    cameras: list[Camera]
    silhouettes: list
    flows: list
    segments: list


def _need(path: Path) -> Path:
    if not path.exists():
        raise FileNotFoundError(str(path))
    return path


def read_frames(manifest, mesh) -> FrameData:
    """Targets, cameras and rasters listed in a ``frames.json`` manifest (paths relative to it)."""
    path = _need(Path(manifest))
    doc = _read_json(path)
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected an object")
    unknown = sorted(set(doc) - {"targets", "cameras", "silhouettes", "flows"})
    if unknown:
        raise ConfigError(f"{path}: unknown key(s) {', '.join(unknown)}")
    base = path.parent
    try:
        targets = np.asarray(_read_json(base / doc["targets"])["frames"], dtype=np.float64)
        cams = [Camera.from_json(c) for c in _read_json(base / doc["cameras"])]
        sils = [load_pgm(_need(base / p)) for p in doc.get("silhouettes", [])]
        flows = [load_flow(_need(base / p)) for p in doc.get("flows", [])]
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"{path}: incomplete frame manifest ({exc})") from exc
    if targets.ndim != 3 or targets.shape[1:] != mesh.vertices.shape:
        raise ConfigError("targets do not match the mesh")
    if len(cams) != len(targets):
        raise ConfigError("need one camera per frame")
    return FrameData(targets, cams, sils, flows)


def read_dataset(root) -> Dataset:
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(str(root))
    mesh = load_mesh(_need(root / "mesh.obj"))
    frames = read_frames(root / "frames.json", mesh)
    skel = load_skeleton(_need(root / "gt_skeleton.json"))
    labels = one_hot_parts(load_weights(_need(root / "gt_weights.bin"))).labels
    seg = _read_json(root / "segments.json")
    segments = list(zip(np.asarray(seg["starts"], float), np.asarray(seg["ends"], float)))
    poses = load_poses(_need(root / "poses.json"))
    return Dataset(mesh, skel, labels, poses, frames.targets, frames.cameras, frames.silhouettes, frames.flows, segments)


# --------------------------------------------------------------------------- sub-commands


def cmd_synth(args, cfg: RunConfig) -> dict:
    spec, noise = synth_spec_from_json(_read_json(args.spec), cfg.seed if args.seed_given else None)
    mesh, gt = generate(spec)
    if noise is not None:
        gt = corrupt(gt, noise)
    out = Path(args.out)
    write_dataset(out, spec, mesh, gt)
    return {"vertices": mesh.n_vertices, "faces": mesh.n_faces, "frames": gt.n_frames, "bones": gt.skeleton.n_bones}


def _contraction_config(args, cfg: RunConfig) -> ContractionConfig:
    over = {k: v for k, v in (("s_l", args.sl), ("vol_eps", args.vol_eps), ("max_iters", args.max_iters)) if v is not None}
    if not over:
        return cfg.contraction
    try:
        return dataclasses.replace(cfg.contraction, **over)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def cmd_contract(args, cfg: RunConfig) -> dict:
    mesh = load_mesh(args.mesh)
    ccfg = _contraction_config(args, cfg)
    res = contract(mesh, ccfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_mesh(res.mesh, out)
    doc = {"iterations": res.iterations, "converged": res.converged, "volumes": res.volumes}
    if args.graph:
        graph = connectivity_surgery(res.mesh, ccfg, original=mesh)
        Path(args.graph).parent.mkdir(parents=True, exist_ok=True)
        _write_json(args.graph, graph.to_json())
        doc["nodes"] = len(graph.nodes)
    return doc


def cmd_skeletonize(args, cfg: RunConfig) -> dict:
    mesh = load_mesh(args.mesh)
    ccfg = _contraction_config(args, cfg)
    res = contract(mesh, ccfg)
    graph = connectivity_surgery(res.mesh, ccfg, original=mesh)
    skel = skeleton_from_graph(graph, mesh)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "graph.json", graph.to_json())
    save_skeleton(skel, out / "skeleton.json")
    return {"nodes": len(graph.nodes), "bones": skel.n_bones, "joints": len(skel.joints)}


def cmd_skin(args, cfg: RunConfig) -> dict:
    mesh = load_mesh(args.mesh)
    skel = load_skeleton(_need(Path(args.skeleton)))
    W = compute_skinning_weights(mesh, skel, temperature=cfg.skinning.temperature)
    R = rigidity_coefficients(W, mesh.edges, cfg.skinning.lam)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_weights(W, out / "weights.bin")
    _write_json(out / "rigidity.json", {"edges": mesh.edges.tolist(), "R": R.R.tolist()})
    return {"bones": W.n_bones, "part_sizes": one_hot_parts(W).counts.tolist()}


def cmd_render(args, cfg: RunConfig) -> dict:
    mesh = load_mesh(args.mesh)
    W = load_weights(_need(Path(args.weights)))
    poses = load_poses(_need(Path(args.poses)))
    cams = [Camera.from_json(c) for c in _read_json(args.cameras)]
    if len(cams) != len(poses):
        raise ConfigError("need one camera per pose")
    X = [blend_skin(mesh, W, p) for p in poses]
    out = Path(args.out)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    (out / "flows").mkdir(exist_ok=True)
    for t, (x, c) in enumerate(zip(X, cams)):
        save_pgm(rasterize_silhouette(x, mesh.faces, c), out / "frames" / f"{_frame_name(t)}.pgm")
        if t + 1 < len(X):
            fr = flow_from_correspondence(x, X[t + 1], c, cams[t + 1], mesh.faces)
            save_flow(fr, out / "flows" / f"{_frame_name(t)}.bin")
    return {"frames": len(X)}


def cmd_refine(args, cfg: RunConfig) -> dict:
    if args.data:
        mesh_path, frames_path = Path(args.data) / "mesh.obj", Path(args.data) / "frames.json"
    elif args.mesh and args.frames:
        mesh_path, frames_path = Path(args.mesh), Path(args.frames)
    else:
        raise ConfigError("refine needs --data DIR, or --mesh and --frames")
    mesh = load_mesh(mesh_path)
    frames = read_frames(frames_path, mesh)
    rcfg = cfg.refine_config()
    initial = load_skeleton(_need(Path(args.skeleton))) if args.skeleton else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res = sios2(mesh, frames, rcfg, initial=initial, out_dir=out)
    save_skeleton(res.skeleton, out / "skeleton.json")
    save_weights(res.weights, out / "weights.bin")
    save_poses(res.poses, out / "poses.json")
    _write_json(out / "config.json", _config_json(cfg))
    return {"bones": res.skeleton.n_bones, "joints": len(res.skeleton.joints), "iterations": len(res.history)}


def _config_json(cfg: RunConfig) -> dict:
    return {
        "seed": cfg.seed,
        "log_level": cfg.log_level,
        "contraction": dataclasses.asdict(cfg.contraction),
        "skinning": dataclasses.asdict(cfg.skinning),
        "refine": {k: v for k, v in dataclasses.asdict(cfg.refine_config()).items() if k not in _OWNED},
    }


def cmd_eval(args, cfg: RunConfig) -> dict:
    gt = read_dataset(args.gt)
    run = Path(args.run)
    if not run.is_dir():
        raise FileNotFoundError(str(run))
    skel = load_skeleton(_need(run / "skeleton.json"))
    W = load_weights(_need(run / "weights.bin"))
    poses = load_poses(_need(run / "poses.json"))
    if W.n_vertices != gt.mesh.n_vertices or len(poses) != len(gt.targets):
        raise ConfigError("run artifacts do not match the ground-truth dataset")
    areas = np.array([float(np.count_nonzero(s.mask > 0.5)) for s in gt.silhouettes])
    m = evaluate(
        gt.mesh, gt.skeleton, gt.labels, gt.poses, gt.targets, gt.cameras, areas, gt.segments, skel, W, poses
    )
    doc = m.to_json()
    _write_json(Path(args.out) if args.out else run / "metrics.json", doc)
    return doc


def cmd_export(args, cfg: RunConfig) -> dict:
    run = Path(args.run)
    skel = load_skeleton(_need(run / "skeleton.json"))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.format == "obj":
        lines = []
        for b in skel.bones:
            a, e = b.endpoints()
            lines += [f"v {a[0]!r} {a[1]!r} {a[2]!r}", f"v {e[0]!r} {e[1]!r} {e[2]!r}"]
        lines += [f"l {2 * k + 1} {2 * k + 2}" for k in range(skel.n_bones)]
        out.write_text("\n".join(lines) + "\n")
    else:
        W = load_weights(_need(run / "weights.bin"))
        doc = {
            "skeleton": skeleton_to_json(skel),
            "weights": W.W.tolist(),
            "poses": [p.to_json() for p in load_poses(_need(run / "poses.json"))],
        }
        _write_json(out, doc)
    return {"bones": skel.n_bones, "format": args.format}


COMMANDS = {
    "synth": cmd_synth,
    "contract": cmd_contract,
    "skeletonize": cmd_skeletonize,
    "skin": cmd_skin,
    "render": cmd_render,
    "refine": cmd_refine,
    "eval": cmd_eval,
    "export": cmd_export,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--seed", type=int, help=f"global seed (overridden by ${SEED_ENV})")
    common.add_argument("--log-level", help="DEBUG, INFO, WARNING or ERROR")
    p = argparse.ArgumentParser(prog="skelkit", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("synth", parents=[common], help="generate a synthetic articulated sequence")
    s.add_argument("--spec", required=True)
    s.add_argument("--out", required=True)
    for name in ("contract", "skeletonize"):
        s = sub.add_parser(name, parents=[common])
        s.add_argument("--mesh", required=True)
        s.add_argument("--out", required=True, help="contracted OBJ" if name == "contract" else "output folder")
        s.add_argument("--sl", type=float, help="contraction weight growth s_L")
        s.add_argument("--vol-eps", type=float)
        s.add_argument("--max-iters", type=int)
        if name == "contract":
            s.add_argument("--graph", help="also write the surgery graph JSON here")
    s = sub.add_parser("skin", parents=[common], help="skinning weights and rigidity coefficients")
    s.add_argument("--mesh", required=True)
    s.add_argument("--skeleton", required=True)
    s.add_argument("--out", required=True)
    s = sub.add_parser("render", parents=[common], help="silhouettes and flow of a skinned sequence")
    s.add_argument("--mesh", required=True)
    s.add_argument("--weights", required=True)
    s.add_argument("--poses", "--pose", dest="poses", required=True)
    s.add_argument("--cameras", "--camera", dest="cameras", required=True)
    s.add_argument("--out", "--out-dir", dest="out", required=True)
    s = sub.add_parser("refine", parents=[common], help="alternate pose fitting and skeleton refinement")
    s.add_argument("--data", help="dataset folder written by synth")
    s.add_argument("--mesh")
    s.add_argument("--frames", help="frames.json manifest")
    s.add_argument("--skeleton", help="initial skeleton (default: contract the mesh)")
    s.add_argument("--out", required=True)
    s = sub.add_parser("eval", parents=[common], help="score a run against ground truth")
    s.add_argument("--run", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--out", help="metrics file (default RUN/metrics.json)")
    s = sub.add_parser("export", parents=[common])
    s.add_argument("--run", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--format", choices=("json", "obj"), default="json")
    return p


_NUMERIC = (FloatingPointError, ContractionError, SingularBlendError, DegeneratePartError, np.linalg.LinAlgError)
_INPUT = (ConfigError, SchemaError, MeshError, SynthError, ValueError, KeyError, OSError)


def _fail(code: int, exc: BaseException) -> int:
    msg = str(exc)
    if isinstance(exc, FileNotFoundError):
        msg = f"file not found: {exc.filename or msg}"
    err = {"error": {"code": code, "type": type(exc).__name__, "message": msg}}
    print(json.dumps(err), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INPUT
    try:
        cfg = load_config(args.config, args.seed)
        args.seed_given = args.seed is not None or bool(os.environ.get(SEED_ENV, "").strip())
        if args.log_level:
            _check_level(args.log_level)
            cfg.log_level = args.log_level
        logging.basicConfig(level=cfg.log_level.upper(), stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
        summary = COMMANDS[args.command](args, cfg)
    except _NUMERIC as exc:
        return _fail(EXIT_NUMERIC, exc)
    except _INPUT as exc:
        return _fail(EXIT_INPUT, exc)
    print(json.dumps({"command": args.command, **summary}, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
