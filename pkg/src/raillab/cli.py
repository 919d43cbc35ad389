"""Command-line entry point.

    raillab gen-env --width 25 --height 25 --agents 4 --seed 7 --out env.json
    raillab train --config run.json --out runs/a
    raillab eval --checkpoint runs/a/final.ckpt --envs 20 --mode argmax --out runs/a/eval
    raillab comm-train --config comm.json --out runs/comm
    raillab replay --file runs/a/eval/replays/ep000.jsonl
    raillab render --file env.json

Exit codes: 0 success, 1 invalid input (config, checkpoint, replay), 2
runtime fault during training.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import os
import sys
import time
from pathlib import Path

from raillab.env.core import Status
from raillab.env.gen import CurriculumStage, GeneratorParams, default_curriculum, generate_env
from raillab.env.grid import mask_moves
from raillab.errors import DomainError, ReplayError, TrainingFault
from raillab.metrics import env_from_header, replay, replay_header

log = logging.getLogger("raillab")

OUT_ENV = "RAILLAB_OUT"
ENV_FORMAT = "raillab-env"


class ConfigError(DomainError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# -- run configuration ------------------------------------------------------------

TRAINER_KEYS = (
    "n_workers", "total_decision_steps", "t_max", "gamma", "lr", "entropy_coef", "value_coef",
    "seed", "masking_enabled", "eval_every", "eval_episodes", "eval_mode", "use_lstm",
)
STAGE_KEYS = ("params", "promote_threshold", "window")
PARAM_KEYS = tuple(f.name for f in dataclasses.fields(GeneratorParams))
TOP_KEYS = ("out", "trainer", "curriculum", "comm")


def _check_keys(d, allowed, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be a JSON object")
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")


@dataclasses.dataclass
class RunConfig:
    trainer: object
    comm: object
    out: str = None

    @classmethod
    def from_dict(cls, d):
        from raillab.comm import CommConfig
        from raillab.trainer import TrainerConfig

        _check_keys(d, TOP_KEYS, "config")
        tr = d.get("trainer", {})
        _check_keys(tr, TRAINER_KEYS, "trainer")
        stages = d.get("curriculum")
        try:
            if stages is None:
                curriculum = default_curriculum()
            else:
                if not isinstance(stages, list):
                    raise ConfigError("curriculum must be a list of stages")
                curriculum = []
                for k, st in enumerate(stages):
                    _check_keys(st, STAGE_KEYS, f"curriculum[{k}]")
                    _check_keys(st.get("params", {}), PARAM_KEYS, f"curriculum[{k}].params")
                    curriculum.append(CurriculumStage.from_dict(st))
            trainer = TrainerConfig(curriculum=curriculum, **tr)
            cm = d.get("comm", {})
            _check_keys(cm, tuple(f.name for f in dataclasses.fields(CommConfig)), "comm")
            comm = CommConfig(**cm)
        except (TypeError, KeyError) as exc:
            raise ConfigError(f"invalid config: {exc}") from None
        return cls(trainer, comm, d.get("out"))

    def resolved(self) -> dict:
        tr = {k: getattr(self.trainer, k) for k in TRAINER_KEYS}
        return {
            "out": self.out,
            "trainer": tr,
            "curriculum": [s.to_dict() for s in self.trainer.curriculum],
            "comm": dataclasses.asdict(self.comm),
        }


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return RunConfig.from_dict(d)


def out_dir(args, config=None) -> Path:
    """Output directory: --out, then $RAILLAB_OUT, then the config's "out"."""
    chosen = args.out or os.environ.get(OUT_ENV) or (config.out if config else None)
    if not chosen:
        raise ConfigError(f"no output directory: pass --out or set {OUT_ENV}")
    path = Path(chosen)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=str) + "\n")


# -- environment files -------------------------------------------------------------

def env_document(env, params=None) -> dict:
    doc = replay_header(env)
    doc["format"] = ENV_FORMAT
    if params is not None:
        doc["generator"] = params.to_dict()
    return doc


def load_env_file(path):
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ReplayError(f"{path}: invalid JSON: {exc.msg}", f"line {exc.lineno}") from None
    if doc.get("format") != ENV_FORMAT:
        raise ConfigError(f"{path} is not an environment file")
    return env_from_header(doc)


# -- rendering ------------------------------------------------------------------------

def _glyph(mask) -> str:
    if not mask:
        return " "
    sides = set()
    switch = False
    for h in range(4):
        outs = mask_moves(mask, h)
        if len(outs) > 1:
            switch = True
        for o in outs:
            sides.add((h + 2) % 4)
            sides.add(o)
    if switch:
        return "*"
    if len(sides) == 1:
        return "o"
    if sides == {1, 3}:
        return "-"
    if sides == {0, 2}:
        return "|"
    if len(sides) == 4:
        return "+"
    if sides in ({0, 1}, {2, 3}):
        return "\\"
    return "/"


def _agent_char(k) -> str:
    return "0123456789abcdefghijklmnopqrstuvwxyz"[k] if k < 36 else "#"


def render_frame(env) -> str:
    """ASCII view: track glyphs, agent ids on their cells, targets as A, B, ..."""
    grid = env.grid
    rows = [[_glyph(int(grid.masks[r, c])) for c in range(grid.width)] for r in range(grid.height)]
    for a in env.agents:
        if a.status != Status.DONE:
            tr, tc = a.target
            rows[tr][tc] = chr(ord("A") + a.id) if a.id < 26 else "T"
    # waiting trains first so an active one on the same cell wins
    for a in sorted(env.agents, key=lambda a: a.status != Status.READY):
        if a.status != Status.DONE:
            r, c = a.position
            rows[r][c] = _agent_char(a.id)
    lines = [f"t={env.step_count}"]
    lines += ["".join(row) for row in rows]
    for a in env.agents:
        where = {Status.READY: "ready", Status.ACTIVE: "active", Status.DONE: "arrived"}[a.status]
        lines.append(f"  {_agent_char(a.id)}: {where} at {a.position} heading {'NESW'[a.heading]} -> {a.target}")
    return "\n".join(lines) + "\n"


# -- commands --------------------------------------------------------------------------

def cmd_gen_env(args):
    if args.comm:
        from raillab.comm import comm_env

        env = comm_env(args.seed)
        params = None
    else:
        params = GeneratorParams(
            args.width, args.height, args.agents, n_hubs=args.hubs, corridor_density=args.density,
            seed=args.seed, rails_per_link=args.rails,
        )
        env = generate_env(params)
    text = json.dumps(env_document(env, params), indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def _metrics_writer(directory, name, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    (directory / name).write_text(buf.getvalue())


def cmd_train(args):
    from raillab.net import save_checkpoint
    from raillab.trainer import train

    config = load_config(args.config)
    if args.budget is not None:
        config.trainer.total_decision_steps = args.budget
        config.trainer.__post_init__()
    out = out_dir(args, config)
    _write_json(out / "resolved_config.json", config.resolved())
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    hyper = {
        "kind": "rail",
        "masking_enabled": config.trainer.masking_enabled,
        "seed": config.trainer.seed,
    }

    def on_eval(steps, params):
        save_checkpoint(ckpt_dir / f"step_{steps:09d}.ckpt", params, dict(hyper, decision_steps=steps))

    metrics = train(config.trainer, checkpoint_cb=on_eval)
    (out / "metrics.csv").write_text(metrics.to_csv())
    _metrics_writer(
        out, "wallclock.csv", ("decision_steps", "seconds"),
        [(r.decision_steps, f"{r.wall_clock:.3f}") for r in metrics.records],
    )
    final_steps = metrics.records[-1].decision_steps
    save_checkpoint(out / "final.ckpt", metrics.params, dict(hyper, decision_steps=final_steps))
    last = metrics.records[-1]
    print(f"trained {final_steps} decisions, {last.episodes} episodes, arrival {last.arrival_rate:.3f}")
    return 0


def _load_params(path):
    from raillab.net import load_checkpoint

    try:
        return load_checkpoint(path)
    except OSError as exc:
        raise ConfigError(f"cannot read checkpoint {path}: {exc.strerror}") from None


def cmd_eval(args):
    from raillab.obs import OBS_DIM
    from raillab.trainer import eval_envs, evaluate

    params, hyper = _load_params(args.checkpoint)
    if hyper.get("kind", "rail") != "rail" or params.input_dim != OBS_DIM:
        raise ConfigError(f"{args.checkpoint} is not a rail-network policy checkpoint")
    if args.env_files:
        envs = [load_env_file(p) for p in args.env_files]
    else:
        gp = GeneratorParams(args.width, args.height, args.agents, rails_per_link=args.rails)
        envs = eval_envs(gp, args.envs, args.seed)
    masking = hyper.get("masking_enabled", True) if args.masking is None else args.masking == "on"
    result = evaluate(params, envs, args.mode, masking=masking, seed=args.seed, record=True)
    out = out_dir(args)
    _metrics_writer(
        out, "eval.csv", ("env_seed", "n_agents", "arrived", "mean_return", "steps", "decisions"),
        [(e.seed, e.n_agents, e.arrived, f"{e.mean_return:.6f}", e.steps, e.decisions) for e in result.episodes],
    )
    (out / "summary.json").write_text(json.dumps(
        {"arrival_rate": result.arrival_rate, "mean_return": result.mean_return,
         "episodes": len(result.episodes), "mode": args.mode, "masking": masking},
        indent=2, sort_keys=True,
    ) + "\n")
    rdir = out / "replays"
    rdir.mkdir(exist_ok=True)
    for k, text in enumerate(result.replays):
        (rdir / f"ep{k:03d}.jsonl").write_text(text)
    print(f"arrival rate {result.arrival_rate:.3f} over {len(result.episodes)} episodes")
    return 0


def cmd_comm_train(args):
    from raillab.comm import random_route_baseline, train_comm
    from raillab.net import save_checkpoint

    config = load_config(args.config)
    comm = config.comm
    if args.episodes is not None:
        comm = dataclasses.replace(comm, episodes=args.episodes)
    if args.no_comm:
        comm = dataclasses.replace(comm, comm_enabled=False)
    config.comm = comm
    out = out_dir(args, config)
    _write_json(out / "resolved_config.json", config.resolved())
    start = time.perf_counter()
    result = train_comm(comm)
    (out / "curve.csv").write_text(result.curve_csv())
    (out / "transcripts.log").write_text(result.transcript_text())
    hist = result.round_histogram(comm.window)
    _metrics_writer(out, "rounds.csv", ("rounds", "episodes"), sorted(hist.items()))
    summary = {
        "episodes": comm.episodes,
        "comm_enabled": comm.comm_enabled,
        "trailing_success": result.success_rate(comm.window),
        "random_route_baseline": random_route_baseline(),
        "round_histogram": {str(k): v for k, v in hist.items()},
    }
    _write_json(out / "summary.json", summary)
    (out / "wallclock.txt").write_text(f"{time.perf_counter() - start:.3f}\n")
    save_checkpoint(out / "final.ckpt", result.params, {"kind": "comm", "comm_enabled": comm.comm_enabled})
    print(f"trailing success {summary['trailing_success']:.3f}; rounds {hist}")
    return 0


def cmd_replay(args):
    text = _read_text(args.file)
    result = replay(text)
    print(f"replayed {result.steps} steps; final state {result.final_hash}")
    return 0


def _read_text(path):
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None


def cmd_render(args):
    from raillab.env.core import step

    if args.comm:
        from raillab.comm import comm_reset

        sys.stdout.write(render_frame(comm_reset(args.seed).env))
        return 0
    if not args.file:
        raise ConfigError("render needs --file or --comm")
    text = _read_text(args.file)
    first = text.split("\n", 1)[0]
    if first.startswith("{") and '"raillab-replay"' in first:
        header = json.loads(first)
        env = env_from_header(header)
        frames = [render_frame(env)]
        for n, line in enumerate(text.splitlines()[1:], start=2):
            try:
                rec = json.loads(line)
                step(env, {int(k): int(v) for k, v in rec["actions"].items()})
            except (json.JSONDecodeError, KeyError, DomainError) as exc:
                raise ReplayError(f"cannot render step: {exc}", f"line {n}") from None
            frames.append(render_frame(env))
        if args.step is not None:
            if not 0 <= args.step < len(frames):
                raise ConfigError(f"step {args.step} outside 0..{len(frames) - 1}")
            frames = [frames[args.step]]
        sys.stdout.write("\n".join(frames))
    else:
        sys.stdout.write(render_frame(load_env_file(args.file)))
    return 0


def build_parser():
    p = _Parser(prog="raillab", description="Multi-agent railway scheduling with masked A3C.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-env", help="generate an environment file")
    g.add_argument("--width", type=int, default=25)
    g.add_argument("--height", type=int, default=25)
    g.add_argument("--agents", type=int, default=4)
    g.add_argument("--hubs", type=int, default=None)
    g.add_argument("--density", type=float, default=0.5)
    g.add_argument("--rails", type=int, default=2, choices=(1, 2))
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--comm", action="store_true", help="write the 2x7 communication layout instead")
    g.add_argument("--out", help="output file (default: stdout)")
    g.set_defaults(func=cmd_gen_env)

    t = sub.add_parser("train", help="train a policy on the curriculum")
    t.add_argument("--config", required=True)
    t.add_argument("--out")
    t.add_argument("--budget", type=int, help="override total_decision_steps")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--envs", type=int, default=20, help="number of generated evaluation environments")
    e.add_argument("--env-files", nargs="+", help="evaluate on these environment files instead")
    e.add_argument("--width", type=int, default=25)
    e.add_argument("--height", type=int, default=25)
    e.add_argument("--agents", type=int, default=4)
    e.add_argument("--rails", type=int, default=2, choices=(1, 2))
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--mode", choices=("sample", "argmax"), default="argmax")
    e.add_argument("--masking", choices=("on", "off"), help="default: as trained")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("comm-train", help="run the two-train communication experiment")
    c.add_argument("--config", required=True)
    c.add_argument("--out")
    c.add_argument("--episodes", type=int)
    c.add_argument("--no-comm", action="store_true", help="disable the talk channel")
    c.set_defaults(func=cmd_comm_train)

    r = sub.add_parser("replay", help="re-simulate a replay file and verify every state hash")
    r.add_argument("--file", required=True)
    r.set_defaults(func=cmd_replay)

    d = sub.add_parser("render", help="ASCII frames of an environment or replay file")
    d.add_argument("--file")
    d.add_argument("--step", type=int, help="only this frame of a replay")
    d.add_argument("--comm", action="store_true", help="render the communication layout")
    d.add_argument("--seed", type=int, default=0)
    d.set_defaults(func=cmd_render)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except TrainingFault as exc:
        print(f"raillab: training fault: {exc}", file=sys.stderr)
        return 2
    except (DomainError, ReplayError) as exc:
        print(f"raillab: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
