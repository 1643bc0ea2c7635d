"""``priqa`` command-line entry point.

Subcommands: scene, partial, train, predict, eval, guide.  Every command writes
its outputs into a staging directory next to ``--out`` and moves them into
place only on success, finishing with ``run_manifest.json``.

Exit codes: 0 success, 2 usage or config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import shutil
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, formats
from .errors import ConfigError, EmptySupportError, FormatError, NumericError, StateError

log = logging.getLogger("priqa")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
MANIFEST_NAME = "run_manifest.json"
PAIR_SEP = "__"


class UsageError(Exception):
    """Bad flags or config values; maps to exit code 2."""


# -- manifest & staging ---------------------------------------------------------


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_tree(path: Path) -> str:
    """Digest of every file under ``path`` (names and bytes), skipping run manifests."""
    path = Path(path)
    if path.is_file():
        return sha256_file(path)
    h = hashlib.sha256()
    for p in sorted(q for q in path.rglob("*") if q.is_file() and q.name != MANIFEST_NAME):
        h.update(p.relative_to(path).as_posix().encode() + b"\0")
        h.update(sha256_file(p).encode())
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    seeds: dict
    inputs: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)
    tool_version: str = __version__
    wall_time: float = 0.0

    def to_json(self) -> dict:
        return {
            "command": self.command,
            "config": self.config,
            "seeds": self.seeds,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "tool_version": self.tool_version,
            "wall_time": round(self.wall_time, 3),
        }


class Run:
    """Staging directory plus manifest bookkeeping for one command."""

    def __init__(self, args: argparse.Namespace, out: Path):
        self.args = args
        self.out = Path(out)
        self.stage = self.out.parent / f".{self.out.name}.staging-{os.getpid()}"
        self.inputs: dict[str, str] = {}
        self.t0 = time.monotonic()

    def __enter__(self):
        if self.stage.exists():
            shutil.rmtree(self.stage)
        self.stage.mkdir(parents=True)
        return self

    def add_input(self, label: str, path) -> None:
        self.inputs[label] = sha256_tree(Path(path))

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            shutil.rmtree(self.stage, ignore_errors=True)
            return False
        outputs = sorted(p.relative_to(self.stage).as_posix() for p in self.stage.rglob("*") if p.is_file())
        manifest = RunManifest(
            command=self.args.command,
            config=resolved_config(self.args),
            seeds={"seed": self.args.seed},
            inputs=self.inputs,
            outputs=outputs,
            wall_time=time.monotonic() - self.t0,
        )
        tmp = self.stage / (MANIFEST_NAME + ".tmp")
        tmp.write_text(json.dumps(manifest.to_json(), indent=2, sort_keys=True) + "\n")
        os.replace(tmp, self.stage / MANIFEST_NAME)
        self.out.mkdir(parents=True, exist_ok=True)
        for rel in outputs + [MANIFEST_NAME]:
            dst = self.out / rel
            dst.parent.mkdir(parents=True, exist_ok=True)
            os.replace(self.stage / rel, dst)
        shutil.rmtree(self.stage, ignore_errors=True)
        return False


def resolved_config(args: argparse.Namespace) -> dict:
    skip = {"func", "config", "command"}
    out = {}
    for k, v in sorted(vars(args).items()):
        if k in skip:
            continue
        out[k] = v
    # round-trip through JSON so paths and tuples serialize the same way every time
    return json.loads(json.dumps(out, default=str))


# -- argument helpers -----------------------------------------------------------


def parse_res(text: str) -> tuple[int, int]:
    try:
        h, w = (int(x) for x in str(text).lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"resolution must look like 64x64, got {text!r}") from None
    if h <= 0 or w <= 0:
        raise argparse.ArgumentTypeError(f"resolution must be positive, got {text!r}")
    return h, w


def parse_ints(text: str) -> list[int]:
    try:
        return [int(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def parse_range(text: str) -> list[int]:
    s = str(text)
    try:
        if "-" in s:
            a, b = (int(x) for x in s.split("-"))
            return list(range(a, b + 1))
        return parse_ints(s)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a range like 1-4, got {text!r}") from None


def parse_pairs(text: str) -> list[tuple[str, str]]:
    pairs = []
    for item in str(text).split(","):
        if not item.strip():
            continue
        q, sep, r = item.partition(":")
        if not sep or not q or not r:
            raise argparse.ArgumentTypeError(f"pairs look like query:reference, got {item!r}")
        pairs.append((q.strip(), r.strip()))
    return pairs


def existing_dir(text: str) -> Path:
    p = Path(text)
    if not p.is_dir():
        raise argparse.ArgumentTypeError(f"directory not found: {text}")
    return p


def existing_file(text: str) -> Path:
    p = Path(text)
    if not p.is_file():
        raise argparse.ArgumentTypeError(f"file not found: {text}")
    return p


def make_provider(args):
    from .featuremetrics import CachedProvider, FileFeatureProvider, ToyFeatureProvider

    if args.provider == "toy":
        inner = ToyFeatureProvider(dim=args.feature_dim, seed=0)
    else:
        inner = FileFeatureProvider(getattr(args, "features_dir", None))
        return inner
    return CachedProvider(inner)


def _frame_index(dataset, name: str) -> int:
    for i, f in enumerate(dataset.frames):
        if f.name == name:
            return i
    if name.isdigit() and int(name) < len(dataset):
        return int(name)
    raise UsageError(f"no frame named {name!r} in dataset {dataset.scene_id!r}")


def _offset_pairs(n: int, offsets) -> list[tuple[int, int]]:
    return [(i, i + o) for i in range(n) for o in offsets if o != 0 and 0 <= i + o < n]


def _resolve_pairs(args, queries, references) -> list[tuple[int, int]]:
    if args.pairs:
        return [(_frame_index(queries, q), _frame_index(references, r)) for q, r in args.pairs]
    pairs = _offset_pairs(min(len(queries), len(references)), args.offsets)
    if not pairs:
        raise EmptySupportError(f"no in-range pairs for offsets {args.offsets}")
    return pairs


def _pair_name(q, r) -> str:
    return f"{q.name}{PAIR_SEP}{r.name}"


# -- commands ---------------------------------------------------------------------


def cmd_scene(args) -> int:
    from .featuremetrics import feature_similarity_map, save_quality_map, ssim_map
    from .scenekit import (
        DEFAULT_RECIPES,
        export_dataset,
        generate_planar_scene,
        generate_two_plane_scene,
        quantize_8bit,
    )
    from .trainer import make_query
    from .types import Dataset, Frame

    gen = generate_planar_scene if args.kind == "planar" else generate_two_plane_scene
    try:
        ds = gen(args.seed, args.views, resolution=tuple(args.res), texture_cells=args.texture_cells, arc_degrees=args.arc)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    ds = quantize_8bit(ds)
    with Run(args, args.out) as run:
        export_dataset(ds, run.stage)
        if args.queries:
            provider = make_provider(args)
            ssim_dir = run.stage / "queries" / "targets" / "ssim"
            feat_dir = run.stage / "queries" / "targets" / "dinov2_sim"
            ssim_dir.mkdir(parents=True)
            feat_dir.mkdir(parents=True)
            qframes, recipes = [], {}
            for i, clean in enumerate(ds.frames):
                cf, recipe = make_query(ds, i, DEFAULT_RECIPES, args.seed)
                # targets are computed on the image exactly as it will read back from disk
                q = Frame(formats.to_uint8(cf.frame.image) / 255.0, clean.camera, name=clean.name)
                qframes.append(q)
                recipes[clean.name] = recipe.recipe_id
                save_quality_map(ssim_map(q.image, clean.image), ssim_dir / f"{clean.name}.png")
                save_quality_map(feature_similarity_map(provider(q), provider(clean)), feat_dir / f"{clean.name}.png")
            export_dataset(Dataset(qframes, scene_id=ds.scene_id + "-queries"), run.stage / "queries")
            (run.stage / "queries/recipes.json").write_text(json.dumps(recipes, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(ds)} frames to {args.out}")
    return EXIT_OK


def _load(path, label=""):
    from .scenekit import load_dataset

    return load_dataset(path)


def cmd_partial(args) -> int:
    from .featuremetrics import build_partial_map, save_quality_map

    refs = _load(args.dataset, "dataset")
    queries = _load(args.queries, "queries") if args.queries else refs
    provider = make_provider(args)
    pairs = _resolve_pairs(args, queries, refs)
    with Run(args, args.out) as run:
        run.add_input("dataset", args.dataset)
        if args.queries:
            run.add_input("queries", args.queries)
        (run.stage / "maps").mkdir()

        def one(pair):
            q, r = queries[pair[0]], refs[pair[1]]
            qm = build_partial_map(q, r, provider, args.drop)
            save_quality_map(qm, run.stage / "maps" / f"{_pair_name(q, r)}.png")
            return _pair_name(q, r), float(qm.valid.mean())

        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            coverage = dict(pool.map(one, pairs))
        (run.stage / "coverage.json").write_text(json.dumps(coverage, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(pairs)} partial maps to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    import torch

    from .completion import NetConfig
    from .losses import LossWeights
    from .scenekit import DEFAULT_RECIPES
    from .trainer import TrainConfig, make_tuples, train

    torch.set_num_threads(1)
    try:
        weights = LossWeights(jsd_temperature=args.jsd_temperature)
        cfg = TrainConfig(
            target_metric=args.target,
            iterations=args.iterations,
            batch_size=args.batch_size,
            lr_initial=args.lr,
            lr_floor=args.lr_floor,
            restart_period=args.restart_period or args.iterations,
            weights=weights,
            seed=args.seed,
            resolution=tuple(args.res),
            checkpoint_every=args.checkpoint_every,
        )
        net = NetConfig.full_scale(tuple(args.res)) if args.net == "full" else NetConfig.toy(tuple(args.res))
        net.validate()
    except (ConfigError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    provider = make_provider(args)
    tuples = []
    for path in args.dataset:
        ds = _load(path, "dataset")
        tuples += make_tuples(ds, provider, DEFAULT_RECIPES, args.offsets, args.seed, args.target, args.drop, args.jobs)
    if args.max_tuples:
        tuples = tuples[: args.max_tuples]
    with Run(args, args.out) as run:
        for i, path in enumerate(args.dataset):
            run.add_input(f"dataset{i}", path)
        resume = None
        if args.resume:
            run.add_input("resume", args.resume)
            resume = args.resume
            prev_log = Path(args.resume).parent / "train_log.jsonl"
            if prev_log.exists():
                shutil.copy(prev_log, run.stage / "train_log.jsonl")
        (run.stage / "train_config.json").write_text(json.dumps(cfg.to_json(), indent=2, sort_keys=True) + "\n")
        _, records = train(cfg, tuples, net, out_dir=run.stage, resume_from=resume)
    last = records[-1] if records else {}
    print(f"trained {len(records)} iterations on {len(tuples)} tuples; final total {last.get('total')}")
    return EXIT_OK


def _load_model(path):
    from .completion import load_checkpoint

    model, meta, _ = load_checkpoint(path)
    model.eval()
    return model


def cmd_predict(args) -> int:
    import torch

    from .evalharness import fuse_maps
    from .featuremetrics import save_quality_map
    from .trainer import predict

    torch.set_num_threads(1)
    model = _load_model(args.checkpoint)
    refs = _load(args.dataset, "dataset")
    queries = _load(args.queries, "queries") if args.queries else refs
    provider = make_provider(args)
    pairs = _resolve_pairs(args, queries, refs)
    with Run(args, args.out) as run:
        run.add_input("checkpoint", args.checkpoint)
        run.add_input("dataset", args.dataset)
        if args.queries:
            run.add_input("queries", args.queries)
        (run.stage / "maps").mkdir()
        by_query: dict[str, list] = {}
        # model inference stays sequential; torch already owns the math threads
        for qi, ri in pairs:
            q, r = queries[qi], refs[ri]
            qm = predict(model, q, r, provider, args.drop)
            save_quality_map(qm, run.stage / "maps" / f"{_pair_name(q, r)}.png")
            by_query.setdefault(q.name, []).append(qm)
        (run.stage / "fused").mkdir()
        for name, maps in sorted(by_query.items()):
            save_quality_map(fuse_maps(maps, args.fuse), run.stage / "fused" / f"{name}.png")
    print(f"wrote {len(pairs)} predictions for {len(by_query)} queries to {args.out}")
    return EXIT_OK


def _read_maps(directory: Path) -> dict[str, "object"]:
    from .featuremetrics import load_quality_map

    out = {}
    for p in sorted(Path(directory).glob("*.png")):
        if p.name.endswith(".valid.png"):
            continue
        out[p.stem] = load_quality_map(p)
    if not out:
        raise FormatError(f"{directory}: no quality maps found")
    return out


def cmd_eval(args) -> int:
    from .evalharness import evaluate, fuse_maps, records_csv, reference_sweep, summary_markdown, sweep_csv

    targets = _read_maps(args.target)
    with Run(args, args.out) as run:
        run.add_input("pred", args.pred)
        run.add_input("target", args.target)
        if args.sweep:
            pair_maps = _read_maps(args.pred)
            grouped: dict[str, dict[str, object]] = {}
            for stem, qm in pair_maps.items():
                q, sep, r = stem.partition(PAIR_SEP)
                if not sep:
                    raise FormatError(f"sweep needs per-pair maps named query{PAIR_SEP}reference, got {stem!r}")
                grouped.setdefault(q, {})[r] = qm
            need = max(args.sweep)
            frames = sorted(f for f in grouped if f in targets and len(grouped[f]) >= need)
            if not frames:
                raise UsageError(f"no query has the {need} references the sweep range {args.sweep} needs")
            skipped = sorted(set(grouped) - set(frames))
            if skipped:
                log.warning("sweep skips %d queries with fewer than %d references", len(skipped), need)
            refs = {f: sorted(grouped[f]) for f in frames}
            curve = reference_sweep(
                frames, refs, lambda f, r: grouped[f][r], targets, args.sweep, args.fuse, args.valid_only, args.scene
            )
            (run.stage / "sweep.csv").write_text(sweep_csv(curve))
        else:
            preds = _read_maps(args.pred)
            grouped = {}
            for stem, qm in preds.items():
                q, _, _ = stem.partition(PAIR_SEP)
                grouped.setdefault(q, []).append(qm)
            fused = {k: fuse_maps(v, args.fuse) if len(v) > 1 else v[0] for k, v in grouped.items()}
            keys = sorted(set(fused) & set(targets))
            if not keys:
                raise FormatError("no predicted maps match any target map by name")
            records, rows = evaluate(
                {(args.scene, k): fused[k] for k in keys},
                {(args.scene, k): targets[k] for k in keys},
                method=args.method,
                target_metric=args.target_metric,
                valid_only=args.valid_only,
            )
            (run.stage / "records.csv").write_text(records_csv(records))
            (run.stage / "summary.md").write_text(summary_markdown(rows))
    print(f"evaluation written to {args.out}")
    return EXIT_OK


def cmd_guide(args) -> int:
    import torch

    from .gsguide import Candidate, CandidateSet, export_guidance, percentile_mask, select_pseudo_gt, soft_mask
    from .scenekit import DEFAULT_RECIPES, corrupt_frame
    from .trainer import predict

    torch.set_num_threads(1)
    model = _load_model(args.checkpoint)
    ds = _load(args.dataset, "dataset")
    provider = make_provider(args)
    view_idx = [_frame_index(ds, v) for v in args.views] if args.views else list(range(1, len(ds), 2))
    inputs = [i for i in range(len(ds)) if i not in set(view_idx)]
    if not inputs:
        raise UsageError("every frame is a target view; no references left")
    entries = []
    for v in view_idx:
        below = [i for i in inputs if i < v]
        above = [i for i in inputs if i > v]
        near = sorted(inputs, key=lambda i: (abs(i - v), i))
        r1 = below[-1] if below else near[0]
        r2 = above[0] if above else (near[1] if len(near) > 1 else near[0])
        cands = []
        for n in range(args.candidates):
            seed = int(np.random.SeedSequence([args.seed, v, n]).generate_state(1)[0])
            image = corrupt_frame(ds[v], DEFAULT_RECIPES[n % len(DEFAULT_RECIPES)], seed).frame
            image = type(image)(formats.to_uint8(image.image) / 255.0, image.camera, name=ds[v].name)
            maps = (predict(model, image, ds[r1], provider, args.drop), predict(model, image, ds[r2], provider, args.drop))
            cands.append(Candidate(image.image, maps))
        sel = select_pseudo_gt(CandidateSet(ds[v].name, cands, (ds[r1].name, ds[r2].name)))
        mask = soft_mask(sel.consolidated) if args.mask == "soft" else percentile_mask(sel.consolidated, args.tau)
        entries.append((sel, mask))
    with Run(args, args.out) as run:
        run.add_input("checkpoint", args.checkpoint)
        run.add_input("dataset", args.dataset)
        export_guidance(entries, run.stage)
        scores = {s.view_id: {"chosen": s.index, "scores": [round(x, 10) for x in s.scores]} for s, _ in entries}
        (run.stage / "selection.json").write_text(json.dumps(scores, indent=2, sort_keys=True) + "\n")
    print(f"guidance for {len(entries)} views written to {args.out}")
    return EXIT_OK


# -- parser -----------------------------------------------------------------------


def _common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--seed", type=int, default=0, help="single source of randomness")
    p.add_argument("--jobs", type=int, default=1, help="worker threads for data preparation")
    p.add_argument("--config", type=existing_file, help="JSON file of flag defaults; explicit flags win")
    p.add_argument("--out", type=Path, required=out_required, help="output directory")


def _provider_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--provider", choices=("toy", "file"), default="toy")
    p.add_argument("--feature-dim", type=int, default=16)
    p.add_argument("--features-dir", type=Path, default=None)
    p.add_argument("--drop", type=float, default=0.0, help="fraction of lowest-confidence points dropped")


def _pair_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dataset", type=existing_dir, required=True, help="reference dataset directory")
    p.add_argument("--queries", type=existing_dir, default=None, help="query dataset (defaults to --dataset)")
    p.add_argument("--pairs", type=parse_pairs, default=None, help="query:reference,... by frame name")
    p.add_argument("--offsets", type=parse_ints, default=[-2, 2], help="reference offsets when --pairs is absent")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="priqa", description="Partial-reference image quality tools.")
    parser.add_argument("--version", action="version", version=f"priqa {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("scene", help="generate and export a synthetic scene")
    _common(p)
    p.add_argument("--views", type=int, default=6)
    p.add_argument("--res", type=parse_res, default=(64, 64))
    p.add_argument("--kind", choices=("planar", "two_plane"), default="planar")
    p.add_argument("--texture-cells", type=int, default=8)
    p.add_argument("--arc", type=float, default=30.0, help="camera arc in degrees")
    p.add_argument("--queries", action="store_true", help="also export corrupted queries and their target maps")
    _provider_flags(p)
    p.set_defaults(func=cmd_scene)

    p = sub.add_parser("partial", help="partial quality maps for query/reference pairs")
    _common(p)
    _pair_flags(p)
    _provider_flags(p)
    p.set_defaults(func=cmd_partial)

    p = sub.add_parser("train", help="train the completion network")
    _common(p)
    p.add_argument("--dataset", type=existing_dir, action="append", required=True)
    p.add_argument("--target", choices=("ssim", "dinov2_sim"), default="ssim")
    p.add_argument("--net", choices=("toy", "full"), default="toy")
    p.add_argument("--res", type=parse_res, default=(32, 32))
    p.add_argument("--iterations", type=int, default=2000)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--lr-floor", type=float, default=1e-6)
    p.add_argument("--restart-period", type=int, default=0, help="0 means one cycle over all iterations")
    p.add_argument("--jsd-temperature", type=float, default=0.2)
    p.add_argument("--checkpoint-every", type=int, default=500)
    p.add_argument("--offsets", type=parse_ints, default=[-4, -2, 2, 4])
    p.add_argument("--max-tuples", type=int, default=0)
    p.add_argument("--resume", type=existing_file, default=None, help="checkpoint to continue from")
    _provider_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="dense quality maps from a trained checkpoint")
    _common(p)
    p.add_argument("--checkpoint", type=existing_file, required=True)
    _pair_flags(p)
    _provider_flags(p)
    p.add_argument("--fuse", choices=("max", "min", "mean", "median"), default="max")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="PLCC/SRCC of predicted maps against targets")
    _common(p)
    p.add_argument("--pred", type=existing_dir, required=True)
    p.add_argument("--target", type=existing_dir, required=True)
    p.add_argument("--fuse", choices=("max", "min", "mean", "median"), default="max")
    p.add_argument("--sweep", type=parse_range, default=None, help="reference-count range, e.g. 1-4")
    p.add_argument("--valid-only", action="store_true")
    p.add_argument("--method", default="priqa")
    p.add_argument("--target-metric", default="ssim")
    p.add_argument("--scene", default="scene")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("guide", help="pseudo-GT selection and supervision masks for splat training")
    _common(p)
    p.add_argument("--checkpoint", type=existing_file, required=True)
    p.add_argument("--dataset", type=existing_dir, required=True)
    p.add_argument("--views", type=lambda s: [v for v in s.split(",") if v], default=None)
    p.add_argument("--candidates", type=int, default=4)
    p.add_argument("--tau", type=float, default=50.0, help="retention percentage")
    p.add_argument("--mask", choices=("binary", "soft"), default="binary")
    _provider_flags(p)
    p.set_defaults(func=cmd_guide)
    return parser


def _peek(argv: list[str]) -> tuple[str | None, str | None]:
    """The subcommand and ``--config`` value, found before full parsing."""
    command = config = None
    it = iter(argv)
    for tok in it:
        if tok == "--config":
            config = next(it, None)
        elif tok.startswith("--config="):
            config = tok.split("=", 1)[1]
        elif command is None and not tok.startswith("-"):
            command = tok
    return command, config


def parse_args(argv=None) -> argparse.Namespace:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    command, config = _peek(argv)
    choices = parser._subparsers._group_actions[0].choices
    if config is not None and command in choices:
        try:
            overrides = json.loads(Path(config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            parser.error(f"cannot read config {config}: {exc}")
        if not isinstance(overrides, dict):
            parser.error("config file must hold a JSON object")
        subparser = choices[command]
        known = {a.dest: a for a in subparser._actions}
        defaults = {}
        for key, value in overrides.items():
            dest = key.replace("-", "_")
            if dest not in known or dest in ("config", "help"):
                parser.error(f"unknown config key {key!r} for {command}")
            action = known[dest]
            # a required flag satisfied by the config file is no longer required on the command line
            action.required = False
            if any(tok == opt or tok.startswith(opt + "=") for tok in argv for opt in action.option_strings):
                continue  # explicit flag wins
            try:
                if isinstance(action, argparse._AppendAction):
                    items = value if isinstance(value, list) else [value]
                    value = [action.type(v) if isinstance(v, str) else v for v in items]
                elif action.type is not None and isinstance(value, str):
                    value = action.type(value)
            except argparse.ArgumentTypeError as exc:
                parser.error(str(exc))
            defaults[dest] = value
        subparser.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, EmptySupportError, StateError, FileNotFoundError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
