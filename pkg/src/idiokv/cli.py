"""Command-line entry point: ``idiokv <subcommand> [options]``.

Every subcommand reads an optional run config (``--config``), applies flag
overrides, and reads/writes artifacts under the artifact directory
(``--artifact-dir``, else ``IDIOKV_ARTIFACT_DIR``, else ``./artifacts``).

Exit codes: 0 on success, 2 on usage errors, 1 on runtime errors.
"""

import argparse
import json
import sys
from pathlib import Path
from typing import Callable, Dict, List, Sequence, Type

from pydantic import BaseModel, ValidationError

from .allocator import (
    BudgetPlan,
    LayerErrorProfile,
    allocate,
    default_bounds,
    profile_layer_errors,
    uniform_plan,
)
from .cache import EvictionDecision, MemoryReport
from .config import RunConfig, get_settings, load_run_config
from .errors import ConfigError, IdioKVError
from .harness.ablation import (
    AblationReport,
    HeadCountReport,
    run_head_count_ablation,
    run_masking_ablation,
)
from .harness.evaluation import EvalReport, run_eval
from .harness.planting import build_planted_model
from .harness.tasks import NeedleTask, generate_tasks, load_tasks, save_tasks
from .heads import HeadScoreDocument, HeadScoreTable, calibrate_heads
from .logging_config import get_logger, setup_logging
from .model import AttentionTrace, GQAModel, ModelConfig, prefill
from .policies import PolicyParams, get_policy_registry

logger = get_logger(__name__)

MODEL_STEM = "model"
TASKS_STEM = "tasks"
HEAD_SCORES = "head_scores.json"
LAYER_ERRORS = "layer_errors.json"
BUDGET_PLAN = "budget_plan.json"
DECISIONS = "decisions.json"
EVAL_REPORT = "eval_report.json"
ABLATION_REPORT = "ablation_report.json"
HEAD_COUNT_REPORT = "head_count_report.json"

SCHEMA_MODELS: Dict[str, Type[BaseModel]] = {
    "run_config": RunConfig,
    "model_config": ModelConfig,
    "head_scores": HeadScoreDocument,
    "layer_errors": LayerErrorProfile,
    "budget_plan": BudgetPlan,
    "eviction_decision": EvictionDecision,
    "memory_report": MemoryReport,
    "eval_report": EvalReport,
    "ablation_report": AblationReport,
    "head_count_report": HeadCountReport,
}


class Context:
    """Resolved config and artifact locations for one invocation."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.config = load_run_config(args.config)
        if args.seed is not None:
            self.config = self.config.model_copy(update={"seed": args.seed})
        self.artifact_dir = Path(args.artifact_dir or get_settings().artifact_dir)
        self.artifact_dir.mkdir(parents=True, exist_ok=True)

    @property
    def seed(self) -> int:
        return self.config.seed

    def path(self, name: str) -> Path:
        return self.artifact_dir / name

    def params(self) -> PolicyParams:
        return PolicyParams.model_validate(self.config.policy.model_dump())

    def load_model(self) -> GQAModel:
        return GQAModel.load(self.path(MODEL_STEM))

    def load_tasks(self):
        return load_tasks(self.path(TASKS_STEM))

    def load_head_table(self, required: bool = True) -> HeadScoreTable | None:
        path = self.path(HEAD_SCORES)
        if not path.exists():
            if required:
                raise ConfigError(f"{path} not found; run profile-heads first")
            return None
        return HeadScoreTable.load_json(path)

    def write_json(self, name: str, payload: BaseModel | list) -> Path:
        path = self.path(name)
        if isinstance(payload, BaseModel):
            text = payload.model_dump_json(indent=2)
        else:
            text = json.dumps(
                [p.model_dump() if isinstance(p, BaseModel) else p for p in payload], indent=2
            )
        path.write_text(text + "\n", encoding="utf-8")
        logger.info(f"Wrote {path}")
        return path

    def write_text(self, name: str, text: str) -> Path:
        path = self.path(name)
        path.write_text(text, encoding="utf-8")
        logger.info(f"Wrote {path}")
        return path


def cmd_gen_model(ctx: Context) -> None:
    section = ctx.config.model
    if ctx.args.planted or section.planted:
        model = build_planted_model(ctx.seed)
    else:
        config = ModelConfig(
            num_layers=section.num_layers,
            num_q_heads=section.num_q_heads,
            num_kv_heads=section.num_kv_heads,
            head_dim=section.head_dim,
            seed=ctx.seed,
        )
        model = GQAModel.seeded(config)
    model.save(ctx.path(MODEL_STEM))
    logger.info(f"Model {model.fingerprint()} saved under {ctx.artifact_dir}")


def cmd_gen_tasks(ctx: Context) -> None:
    model = ctx.load_model()
    params = ctx.params()
    tasks = generate_tasks(
        ctx.config.tasks, model.config.hidden_dim, ctx.seed, params.sink, params.window
    )
    save_tasks(ctx.path(TASKS_STEM), tasks)


def cmd_profile_heads(ctx: Context) -> None:
    table = calibrate_heads(ctx.load_model(), ctx.load_tasks())
    table.save_json(ctx.path(HEAD_SCORES))
    for kind in ("semantic", "copy_paste"):
        ctx.write_text(f"head_scores_{kind}.csv", table.to_csv(kind))


def cmd_profile_errors(ctx: Context) -> None:
    model = ctx.load_model()
    section = ctx.config.allocation
    args = ctx.args
    policy = get_policy_registry().get_policy(
        "compresskv", ctx.params(), ctx.load_head_table(), model.config.num_kv_heads
    )
    profile = profile_layer_errors(
        model,
        ctx.load_tasks(),
        probe_budget=args.probe_budget or section.probe_budget,
        policy=policy,
        decode_steps=args.steps or section.decode_steps,
        mode=args.mode or section.mode,
    )
    ctx.write_json(LAYER_ERRORS, profile)


def cmd_allocate(ctx: Context) -> None:
    args = ctx.args
    section = ctx.config.allocation
    total = args.total or section.total
    if total is None:
        raise ConfigError("allocate needs --total or allocation.total in the config")

    default_profile = ctx.path(LAYER_ERRORS)
    if args.profile or (args.layers is None and default_profile.exists()):
        path = Path(args.profile) if args.profile else default_profile
        profile = LayerErrorProfile.model_validate_json(path.read_text(encoding="utf-8"))
        errors = profile.normalized
        if args.layers and args.layers != len(errors):
            raise ConfigError(f"--layers {args.layers} disagrees with the {len(errors)}-layer profile")
    elif args.layers:
        errors = [1.0 / args.layers] * args.layers
    else:
        raise ConfigError(f"No error profile at {default_profile}; pass --profile or --layers")

    m = args.min if args.min is not None else section.min_budget
    big_m = args.max if args.max is not None else section.max_budget
    if m is None or big_m is None:
        floor, ceiling = default_bounds(total, len(errors))
        m = floor if m is None else m
        big_m = ceiling if big_m is None else big_m
    plan = allocate(errors, total, m, big_m)
    ctx.write_json(BUDGET_PLAN, plan)
    ctx.write_text("budget_plan.csv", plan.to_csv())


def _budgets(ctx: Context, layers: int) -> List[int]:
    args = ctx.args
    if args.budget is not None:
        return [args.budget] * layers
    plan_path = Path(args.plan) if args.plan else ctx.path(BUDGET_PLAN)
    if plan_path.exists():
        plan = BudgetPlan.model_validate_json(plan_path.read_text(encoding="utf-8"))
        return plan.budgets
    if ctx.config.evaluation.budget is not None:
        return [ctx.config.evaluation.budget] * layers
    raise ConfigError("evict needs --budget, --plan, or evaluation.budget in the config")


def cmd_evict(ctx: Context) -> None:
    args = ctx.args
    num_kv_heads = args.kv_heads
    if args.trace:
        trace = AttentionTrace.load(args.trace)
    else:
        model = ctx.load_model()
        tasks = ctx.load_tasks()
        if not 0 <= args.task < len(tasks):
            raise ConfigError(f"--task {args.task} outside the {len(tasks)} tasks of the bundle")
        task = tasks[args.task]
        _, _, trace = prefill(model, task.prompt_embeddings)
        trace.save(ctx.path(f"trace_task{args.task}"))
        num_kv_heads = num_kv_heads or model.config.num_kv_heads
    policy = get_policy_registry().get_policy(
        args.policy,
        ctx.params(),
        ctx.load_head_table(required=args.policy == "compresskv"),
        num_kv_heads or 1,
    )
    decisions = policy.decide_all(trace, _budgets(ctx, trace.num_layers))
    ctx.write_json(DECISIONS, decisions)


def _eval_budget(ctx: Context, tasks: Sequence[NeedleTask]) -> int:
    """Uniform per-layer budget: flag, then config, then a quarter of the prompt."""
    if not tasks:
        raise ConfigError("The task bundle is empty")
    return ctx.args.budget or ctx.config.evaluation.budget or max(1, tasks[0].prompt_len // 4)


def cmd_eval(ctx: Context) -> None:
    args = ctx.args
    section = ctx.config.evaluation
    model = ctx.load_model()
    tasks = ctx.load_tasks()
    layers = model.config.num_layers

    names = args.policy or section.policies
    table = ctx.load_head_table(required="compresskv" in names)
    registry = get_policy_registry()
    policies = [
        registry.get_policy(name, ctx.params(), table, model.config.num_kv_heads) for name in names
    ]

    budget = _eval_budget(ctx, tasks)
    plans = [uniform_plan(budget * layers, layers)]
    plan_path = ctx.path(BUDGET_PLAN)
    if section.use_plan and args.budget is None and plan_path.exists():
        plans.append(BudgetPlan.model_validate_json(plan_path.read_text(encoding="utf-8")))

    report = run_eval(model, policies, plans, tasks)
    ctx.write_json(EVAL_REPORT, report)


def cmd_ablate(ctx: Context) -> None:
    args = ctx.args
    model, table, tasks = ctx.load_model(), ctx.load_head_table(), ctx.load_tasks()
    if args.head_counts:
        layers = model.config.num_layers
        plan = uniform_plan(_eval_budget(ctx, tasks) * layers, layers)
        counts = run_head_count_ablation(model, table, args.head_counts, plan, tasks, ctx.params())
        ctx.write_json(HEAD_COUNT_REPORT, counts)
        return

    k_values = args.k or ctx.config.ablation.k_values
    report = run_masking_ablation(model, table, k_values, tasks, seed=ctx.seed)
    ctx.write_json(ABLATION_REPORT, report)
    ctx.write_text("ablation_curves.csv", report.to_csv())


def schema_documents() -> Dict[str, str]:
    """File name to JSON Schema text for every artifact model."""
    return {
        f"{name}.schema.json": json.dumps(model.model_json_schema(), indent=2, sort_keys=True) + "\n"
        for name, model in SCHEMA_MODELS.items()
    }


def cmd_schemas(ctx: Context) -> None:
    out = Path(ctx.args.output) if ctx.args.output else ctx.path("schemas")
    out.mkdir(parents=True, exist_ok=True)
    for file_name, text in schema_documents().items():
        (out / file_name).write_text(text, encoding="utf-8")
    logger.info(f"Wrote {len(SCHEMA_MODELS)} schemas to {out}")


COMMANDS: Dict[str, Callable[[Context], None]] = {
    "gen-model": cmd_gen_model,
    "gen-tasks": cmd_gen_tasks,
    "profile-heads": cmd_profile_heads,
    "profile-errors": cmd_profile_errors,
    "allocate": cmd_allocate,
    "evict": cmd_evict,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "schemas": cmd_schemas,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="Run config JSON")
    common.add_argument("--seed", type=int, default=None, help="Override the config seed")
    common.add_argument("--log-level", default=None, help="Logging level (default from settings)")
    common.add_argument("--artifact-dir", type=Path, default=None, help="Artifact directory")

    parser = argparse.ArgumentParser(prog="idiokv", description="GQA KV-cache compression toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-model", parents=[common], help="Build a seeded or planted model")
    p.add_argument("--planted", action="store_true", help="Plant head roles")

    sub.add_parser("gen-tasks", parents=[common], help="Generate needle tasks for the model")
    sub.add_parser("profile-heads", parents=[common], help="Score heads on the tasks")

    p = sub.add_parser("profile-errors", parents=[common], help="Profile per-layer errors")
    p.add_argument("--probe-budget", type=int, default=None)
    p.add_argument("--steps", type=int, default=None, help="Decode steps per task")
    p.add_argument("--mode", choices=["one_at_a_time", "joint"], default=None)

    p = sub.add_parser("allocate", parents=[common], help="Allocate per-layer budgets")
    p.add_argument("--total", type=int, default=None, help="Global token budget")
    p.add_argument("--layers", type=int, default=None, help="Layer count (uniform errors)")
    p.add_argument("--min", type=int, default=None, help="Per-layer floor")
    p.add_argument("--max", type=int, default=None, help="Per-layer ceiling")
    p.add_argument("--profile", default=None, help="Layer error profile JSON")

    p = sub.add_parser("evict", parents=[common], help="Emit eviction decisions")
    p.add_argument("--policy", default="compresskv")
    p.add_argument("--budget", type=int, default=None, help="Uniform per-layer budget")
    p.add_argument("--plan", default=None, help="Budget plan JSON")
    p.add_argument("--trace", default=None, help="Trace bundle stem (default: prefill a task)")
    p.add_argument("--task", type=int, default=0, help="Task index when no trace is given")
    p.add_argument("--kv-heads", type=int, default=None, help="KV groups of the trace")

    p = sub.add_parser("eval", parents=[common], help="Evaluate policies end to end")
    p.add_argument("--policy", action="append", default=None, help="Policy name (can repeat)")
    p.add_argument("--budget", type=int, default=None, help="Uniform per-layer budget")

    p = sub.add_parser("ablate", parents=[common], help="Head-masking ablation")
    p.add_argument("--k", type=int, action="append", default=None, help="Heads to mask (can repeat)")
    p.add_argument(
        "--head-counts",
        type=int,
        nargs="+",
        default=None,
        help="Sweep compresskv over these selected-head counts instead of masking",
    )
    p.add_argument("--budget", type=int, default=None, help="Uniform per-layer budget for --head-counts")

    p = sub.add_parser("schemas", parents=[common], help="Write JSON Schemas of every artifact")
    p.add_argument("--output", type=Path, default=None, help="Directory (default: <artifact-dir>/schemas)")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 2

    setup_logging(args.log_level)
    try:
        ctx = Context(args)
        COMMANDS[args.command](ctx)
    except (IdioKVError, OSError, ValidationError, KeyError, ValueError, IndexError) as e:
        logger.error(f"{args.command} failed: {e}", exc_info=True)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
