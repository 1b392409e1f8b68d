"""Command-line entry points: parse, gen, train, eval, ground."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import diffkernel as dk
from .descparser import ParseError, parse
from .diffkernel import ParamStore
from .groundgraph import GroundingError
from .langgraph import build_language_graph
from .model import ModelConfig, forward, grounding_json
from .scenegeo import GeometryError, SceneLoadError, generate_proposals, load_scene
from .synth import Corpus, GenerationError, SynthConfig, gen_synthetic
from .trainer import DivergenceError, TrainConfig, evaluate, train, write_metrics

log = logging.getLogger("ground3d")

ERROR_CODES = [
    (SceneLoadError, "SCENE_LOAD"),
    (ParseError, "PARSE"),
    (dk.ConfigurationError, "CONFIG"),
    (DivergenceError, "DIVERGED"),
    (GroundingError, "GROUNDING"),
    (GenerationError, "GENERATION"),
    (GeometryError, "GEOMETRY"),
    (FileNotFoundError, "IO"),
    (json.JSONDecodeError, "CONFIG"),
    (ValueError, "INVALID"),
]


class PipelineError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause


def error_code(exc: BaseException) -> str:
    if isinstance(exc, PipelineError):
        exc = exc.cause
    for cls, code in ERROR_CODES:
        if isinstance(exc, cls):
            return code
    return "INTERNAL"


def run_pipeline(scene_path, text: str, checkpoint=None, proposal_mode: str = "gt",
                 seed: int = 0, config: ModelConfig | None = None) -> dict:
    """Scene file + description -> grounding JSON with per-stage timing."""
    timing: dict[str, float] = {}
    state: dict = {}

    def stage(name, fn):
        t = time.perf_counter()
        try:
            out = fn()
        except Exception as exc:  # attach the stage, keep the cause for the error code
            raise PipelineError(name, exc) from exc
        timing[name] = time.perf_counter() - t
        return out

    cfg = config or ModelConfig()
    store = stage("load_checkpoint", lambda: ParamStore.load(checkpoint) if checkpoint else ParamStore(seed))
    scene = stage("load_scene", lambda: load_scene(scene_path))
    parsed = stage("parse", lambda: parse(text))
    state["proposals"] = stage("proposals", lambda: generate_proposals(
        scene, proposal_mode, np.random.default_rng(seed), cfg.k_proposals))
    result = stage("ground", lambda: forward(store, scene, parsed, state["proposals"], cfg))
    out = grounding_json(scene, text, result)
    out["timing"] = {k: round(v, 6) for k, v in timing.items()}
    return out


# ---------------------------------------------------------------- config files

def read_config(path) -> dict:
    if not path:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise dk.ConfigurationError(f"config file not found: {path}") from None
    if not isinstance(data, dict):
        raise dk.ConfigurationError(f"{path}: config must be a JSON object")
    return data


def _section(cfg: dict, name: str) -> dict:
    """A config file may hold {"synth": {...}, "train": {...}} or a flat section."""
    return dict(cfg.get(name, cfg if not ({"synth", "train"} & set(cfg)) else {}))


def _emit(obj, output) -> None:
    text = json.dumps(obj, indent=2)
    if output:
        Path(output).write_text(text + "\n")
    else:
        print(text)


# ---------------------------------------------------------------- subcommands

def cmd_parse(args) -> int:
    parsed = parse(args.text)
    out = parsed.to_dict()
    if args.graph:
        store = ParamStore.load(args.checkpoint) if args.checkpoint else ParamStore(args.seed or 0)
        out["graph"] = build_language_graph(store, parsed).to_dict()
    _emit(out, args.output)
    return 0


def cmd_gen(args) -> int:
    section = _section(read_config(args.config), "synth")
    if args.seed is not None:
        section["seed"] = args.seed
    if args.num_scenes is not None:
        section["num_scenes"] = args.num_scenes
    cfg = SynthConfig.from_dict(section)
    corpus = gen_synthetic(cfg)
    out = Path(args.output or "corpus")
    manifest = corpus.save(out)
    print(json.dumps({"manifest": str(manifest), "samples": len(corpus.samples),
                      "train": len(corpus.split("train")), "val": len(corpus.split("val"))}))
    return 0


def _train_config(args) -> TrainConfig:
    section = _section(read_config(args.config), "train")
    if getattr(args, "seed", None) is not None:
        section["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        section["epochs"] = args.epochs
    return TrainConfig.from_dict(section)


def cmd_train(args) -> int:
    cfg = _train_config(args)
    corpus = Corpus.load(args.corpus)
    out = Path(args.output or "model.npz")
    val = corpus.split("val")

    def progress(m):
        log.info("epoch %d total %.4f acc@0.5 %s", m.epoch, m.losses["total"], m.acc50)

    _, history = train(corpus, cfg, val=val, checkpoint=out, eval_every=args.eval_every,
                       progress=progress)
    metrics = Path(args.metrics) if args.metrics else out.with_suffix(".csv")
    write_metrics(history, metrics)
    print(json.dumps({"checkpoint": str(out), "metrics": str(metrics),
                      "final_loss": history[-1].losses["total"] if history else None}))
    return 0


def cmd_eval(args) -> int:
    cfg = _train_config(args)
    if args.checkpoint and Path(str(args.checkpoint) + ".json").exists() and not args.config:
        cfg = TrainConfig.from_dict(json.loads(Path(str(args.checkpoint) + ".json").read_text()))
    corpus = Corpus.load(args.corpus)
    samples = corpus.split(args.split) if args.split != "all" else corpus.samples
    res = evaluate(args.checkpoint, samples, cfg)
    _emit(res, args.output)
    return 0


def cmd_ground(args) -> int:
    out = run_pipeline(args.scene, args.description, args.checkpoint, args.proposals,
                       args.seed or 0)
    _emit(out, args.output)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ground3d", description="Description-guided 3D object grounding")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed")
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--output", "-o", help="output path (default: stdout or a fixed name)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("parse", parents=[common], help="parse a description into a scene graph")
    sp.add_argument("text")
    sp.add_argument("--graph", action="store_true", help="also dump the language scene graph")
    sp.add_argument("--checkpoint", help="parameters used for --graph attention weights")
    sp.set_defaults(func=cmd_parse)

    sp = sub.add_parser("gen", parents=[common], help="generate a synthetic corpus")
    sp.add_argument("--num-scenes", type=int)
    sp.set_defaults(func=cmd_gen)

    sp = sub.add_parser("train", parents=[common], help="train on a corpus manifest")
    sp.add_argument("--corpus", required=True, help="corpus.jsonl manifest")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--metrics", help="CSV path for per-epoch metrics")
    sp.add_argument("--eval-every", type=int, default=0)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", parents=[common], help="Acc@0.25 / Acc@0.5 of a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--split", default="val", choices=["train", "val", "all"])
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ground", parents=[common], help="ground one description in one scene")
    sp.add_argument("--scene", required=True)
    sp.add_argument("--description", required=True)
    sp.add_argument("--checkpoint")
    sp.add_argument("--proposals", default="gt", choices=["gt", "jitter", "random"])
    sp.set_defaults(func=cmd_ground)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:
        code = error_code(exc)
        stage = f" stage={exc.stage}" if isinstance(exc, PipelineError) else ""
        msg = str(exc.cause if isinstance(exc, PipelineError) else exc).replace("\n", " ")
        print(f"error code={code}{stage}: {msg}", file=sys.stderr)
        if code == "INTERNAL":
            log.debug("traceback", exc_info=True)
        return 2 if code == "INTERNAL" else 1


if __name__ == "__main__":
    sys.exit(main())
