# Copyright (c) bpfbox authors.
# All rights reserved.
#
# This source code is licensed under the license found in the
# LICENSE file in the root directory of this source tree.
#
import argparse
import json
import os
import sys
from logging import getLogger

import pandas as pd

from bpfbox.analyze import LoadError
from bpfbox.engine import MODES, Engine, UnsupportedMode, check_mode, load
from bpfbox.errors import BpfBoxError
from bpfbox.harness import (
    BENCH_COLUMNS,
    TrialRecord,
    compare_context,
    inject_faults,
    render_table,
    run_microbench,
    verify_transparency,
)
from bpfbox import isa
from bpfbox.scenario import BUILTIN_PREFIX, BUILTIN_SCENARIOS, build_world, load_scenario
from bpfbox.utils import bool_flag, initialize_exp

logger = getLogger()

EXIT_OK = 0
EXIT_FAULT = 1
EXIT_CONFIG = 2
EXIT_ESCAPE = 3


def mode_type(s):
    try:
        return check_mode(s)
    except UnsupportedMode as e:
        raise argparse.ArgumentTypeError(str(e))


def modes_type(s):
    return [mode_type(m.strip()) for m in s.split(",") if m.strip()]


parser = argparse.ArgumentParser(prog="bpfbox", description="Sandboxed execution of eBPF-style programs")

#########################
#### common parameters ##
#########################
common = argparse.ArgumentParser(add_help=False)
common.add_argument("--dump_path", type=str, default=None,
                    help="experiment dump path for logs and stats (nothing is written without it)")
common.add_argument("--verbose", type=bool_flag, default=False,
                    help="log at debug level")
common.add_argument("--json", action="store_true",
                    help="print results as JSON")

subparsers = parser.add_subparsers(dest="command")

#########################
#### program tools ######
#########################
p = subparsers.add_parser("rewrite", parents=[common], help="sfi-rewrite a program")
p.add_argument("--program", required=True, help=".asm or .bin program")
p.add_argument("--scenario", required=True, help="scenario JSON path or builtin:<name>")
p.add_argument("--core", type=int, default=0, help="core whose sandbox the masks target")
p.add_argument("--out", type=str, default=None, help="write the rewritten program here (.asm or .bin)")

p = subparsers.add_parser("disasm", parents=[common], help="disassemble a program")
p.add_argument("--program", required=True)
p.add_argument("--annotate", type=bool_flag, default=True,
               help="mark inserted instructions with their category")

#########################
#### execution ##########
#########################
p = subparsers.add_parser("run", parents=[common], help="run a program in one mode")
p.add_argument("--program", required=True)
p.add_argument("--scenario", required=True)
p.add_argument("--mode", type=mode_type, default="sfi", help="|".join(MODES))
p.add_argument("--core", type=int, default=0)
p.add_argument("--context", choices=("partial", "full"), default="partial",
               help="copy only the accessed context fields, or all of them")
p.add_argument("--step_budget", type=int, default=1000000)
p.add_argument("--privileged", type=bool_flag, default=False,
               help="load as a privileged program (no instruction limit)")

#########################
#### experiments ########
#########################
p = subparsers.add_parser("inject", parents=[common], help="fault-injection campaign")
p.add_argument("--program", default=None, help="defaults to the scenario's first program")
p.add_argument("--scenario", required=True)
p.add_argument("--mode", type=mode_type, required=True)
p.add_argument("--trials", type=int, default=10000)
p.add_argument("--seed", type=int, default=7)
p.add_argument("--targets", choices=("uniform", "sentinel"), default="uniform",
               help="draw targets over the arena, or aim at the planted secret")
p.add_argument("--log_every", type=int, default=1000)

p = subparsers.add_parser("bench", parents=[common], help="per-category cost table")
p.add_argument("--scenario-set", "--scenario_set", dest="scenario_set", default="builtin",
               help="'builtin' or a comma-separated list of scenarios")
p.add_argument("--modes", type=modes_type, default=list(MODES))
p.add_argument("--reps", type=int, default=3)
p.add_argument("--context", choices=("partial", "full"), default="partial")

p = subparsers.add_parser("verify", parents=[common], help="transparency oracle")
p.add_argument("--scenario-set", "--scenario_set", dest="scenario_set", default="builtin")
p.add_argument("--programs", type=int, default=1000, help="synthesized programs per scenario")
p.add_argument("--seed", type=int, default=0)
p.add_argument("--modes", type=modes_type, default=list(MODES))


def scenario_set(spec):
    names = [BUILTIN_PREFIX + n for n in BUILTIN_SCENARIOS] if spec == "builtin" else spec.split(",")
    return [load_scenario(name.strip()) for name in names]


def read_program(args, world=None):
    context_type = world.spec.name if world is not None and world.spec is not None else None
    program = isa.load_program(
        args.program, "privileged" if getattr(args, "privileged", False) else "unprivileged",
        context_type,
    )
    program.name = os.path.splitext(os.path.basename(args.program))[0]
    return program


def emit(args, data, text):
    if args.json:
        print(json.dumps(data, indent=2, sort_keys=True, default=str))
    else:
        print(text)


# ============ commands ... ============

def cmd_disasm(args, stats):
    print(isa.disassemble(read_program(args), annotate=args.annotate), end="")
    return EXIT_OK


def cmd_rewrite(args, stats):
    world = build_world(load_scenario(args.scenario), "sfi")
    loaded = load(read_program(args, world), world, "sfi", args.core)
    if args.out is None:
        print(isa.disassemble(loaded.program, annotate=True), end="")
    elif args.out.endswith(".bin"):
        with open(args.out, "wb") as f:
            f.write(isa.encode(loaded.program))
    else:
        with open(args.out, "w") as f:
            f.write(isa.disassemble(loaded.program, annotate=True))
    logger.info("rewrote %s: %s" % (loaded.source.name, loaded.report))
    if args.json:
        print(json.dumps(loaded.report, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_run(args, stats):
    world = build_world(load_scenario(args.scenario), args.mode)
    program = read_program(args, world)
    engine = Engine(world, args.mode, args.core, step_budget=args.step_budget,
                    copy_mode=args.context)
    result = engine.run(program)
    cost = result.cost.as_dict()
    text = ["r0=%i" % result.r0, "status=%s" % result.status]
    if result.fault is not None:
        addr = result.fault["addr"]
        text.append("fault=%s pc=%s addr=%s"
                    % (result.fault["kind"], result.fault["pc"], "-" if addr is None else hex(addr)))
    text.append("cost " + " ".join("%s=%i" % (k, v) for k, v in cost.items()))
    text.append("steps=%i" % result.steps)
    text += ["log[%i]=%s" % (i, entry.hex()) for i, entry in enumerate(result.log)]
    emit(args, result.as_dict(), "\n".join(text))
    stats.update({"program": program.name, "mode": args.mode, "r0": result.r0,
                  "status": result.status, "total": cost["total"], "steps": result.steps})
    return EXIT_FAULT if result.faulted else EXIT_OK


def cmd_inject(args, stats):
    config = load_scenario(args.scenario)
    world = build_world(config, args.mode)
    if args.program is None:
        programs = world.load_programs()
        if not programs:
            raise BpfBoxError("scenario %s has no programs" % world.name)
        program, core = programs[0]
    else:
        program, core = read_program(args, world), 0
    report = inject_faults(program, world, args.trials, args.seed, targets=args.targets,
                           core_id=core, log_every=args.log_every, stats=stats)
    d = report.as_dict()
    text = "\n".join("%-20s %s" % (k, v) for k, v in d.items())
    emit(args, d, text)
    return EXIT_ESCAPE if report.escapes else EXIT_OK


def cmd_bench(args, stats):
    configs = scenario_set(args.scenario_set)
    table = run_microbench(configs, args.modes, args.reps, args.context, stats=stats)
    ctx = [compare_context(c) for c in configs]
    ctx_table = pd.concat(ctx, ignore_index=True)
    if args.json:
        print(json.dumps({"costs": table.to_dict(orient="records"),
                          "context": ctx_table.to_dict(orient="records")}, indent=2))
    else:
        print(render_table(table))
        print()
        print(render_table(ctx_table))
    return EXIT_OK


def cmd_verify(args, stats):
    report = verify_transparency(scenario_set(args.scenario_set), args.programs, args.seed, args.modes)
    emit(args, report.as_dict(),
         "programs=%i runs=%i disagreements=%i"
         % (report.programs, report.runs, len(report.disagreements)))
    return EXIT_OK if report.agreed else EXIT_FAULT


COMMANDS = {
    "disasm": (cmd_disasm, ()),
    "rewrite": (cmd_rewrite, ()),
    "run": (cmd_run, ("program", "mode", "r0", "status", "total", "steps")),
    "inject": (cmd_inject, TrialRecord._fields),
    "bench": (cmd_bench, tuple(BENCH_COLUMNS)),
    "verify": (cmd_verify, ()),
}


def main(argv=None):
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_CONFIG
    handler, columns = COMMANDS[args.command]
    _, stats = initialize_exp(args, *columns)
    try:
        code = handler(args, stats)
    except (LoadError, BpfBoxError, OSError, ValueError) as e:
        logger.debug("%s failed" % args.command, exc_info=True)
        print("error: %s" % e, file=sys.stderr)
        return EXIT_CONFIG
    if stats.path is not None and not stats.stats.empty:
        stats.stats.to_pickle(stats.path)
    return code


if __name__ == "__main__":
    sys.exit(main())
