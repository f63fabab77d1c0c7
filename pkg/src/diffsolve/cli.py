"""Command-line entry point.

Subcommands: generate, label, train, solve, eval, sweep, export-heatmap.
Every run is deterministic under ``--seed``: per-instance and per-sample
random streams are derived from it, never from global state.
"""

from __future__ import annotations

import argparse
import sys
import zlib

import numpy as np

from . import checkpoint as ckpt
from . import harness, oracle, training
from .decoding import run_reverse_chain
from .diffusion import make_inference_schedule, make_noise_schedule
from .instances import (TspInstance, dense_graph, generate_er, generate_tsp,
                        load_instances, mis_graph, save_instances, sparsify)


def _child_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence(entropy=seed,
                                      spawn_key=(index,)).generate_state(1)[0])


def _instance_seed(seed: int, instance_id: str) -> int:
    return _child_seed(seed, zlib.crc32(instance_id.encode("utf-8")))


def _add_decode_flags(p: argparse.ArgumentParser, need_model: bool = True
                      ) -> None:
    p.add_argument("--model", required=need_model, help="model checkpoint")
    p.add_argument("--steps", default="50",
                   help="denoising steps (comma list for sweep)")
    p.add_argument("--samples", default="1",
                   help="parallel samples (comma list for sweep)")
    p.add_argument("--schedule", choices=("linear", "cosine"),
                   default="cosine", help="inference timestep spacing")
    p.add_argument("--two-opt", action="store_true",
                   help="refine decoded TSP tours with 2-opt")
    p.add_argument("--knn", type=int, default=0,
                   help="TSP graph sparsification (0 = dense)")
    p.add_argument("--T", type=int, default=1000, help="training chain length")
    p.add_argument("--beta1", type=float, default=1e-4)
    p.add_argument("--betaT", type=float, default=0.02)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="diffsolve",
        description="Denoising-diffusion solvers for TSP and MIS")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate problem instances")
    p.add_argument("--task", choices=("tsp", "mis"), required=True)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("-n", type=int, default=50, help="TSP node count")
    p.add_argument("--n-min", type=int, default=20, help="MIS minimum nodes")
    p.add_argument("--n-max", type=int, default=20, help="MIS maximum nodes")
    p.add_argument("-p", type=float, default=0.15,
                   help="MIS edge probability")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("label", help="attach oracle labels to instances")
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train a denoiser")
    p.add_argument("--config", required=True, help="key = value config file")
    p.add_argument("--seed", type=int, default=None, help="override seed")
    p.add_argument("--out", default=None, help="override output directory")

    p = sub.add_parser("solve", help="solve instances with a trained model")
    _add_decode_flags(p)
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("eval", help="evaluate a model on labeled instances")
    _add_decode_flags(p)
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--out", default=None, help="report CSV path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eval-seeds", type=int, default=1,
                   help="number of evaluation seeds to average over")

    p = sub.add_parser("sweep", help="steps x samples grid evaluation")
    _add_decode_flags(p)
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--out", required=True, help="grid CSV path")
    p.add_argument("--plot-data", default=None,
                   help="optional long-form (x, series, value) CSV")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("export-heatmap", help="write raw heatmap scores")
    _add_decode_flags(p)
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _cmd_generate(args) -> int:
    instances = []
    for i in range(args.count):
        seed = _child_seed(args.seed, i)
        if args.task == "tsp":
            instances.append(generate_tsp(args.n, seed))
        else:
            instances.append(generate_er(args.n_min, args.n_max, args.p, seed))
    save_instances(args.out, instances)
    print(f"wrote {len(instances)} {args.task} instances to {args.out}")
    return 0


def _cmd_label(args) -> int:
    instances = load_instances(args.in_path)
    for i, inst in enumerate(instances):
        seed = _child_seed(args.seed, i)
        if isinstance(inst, TspInstance):
            inst.label = oracle.label_tsp(inst, seed)
        else:
            inst.label = oracle.label_mis(inst, seed)
    save_instances(args.out, instances)
    print(f"labeled {len(instances)} instances into {args.out}")
    return 0


def _cmd_train(args) -> int:
    config = training.load_config(args.config)
    if args.seed is not None:
        config.seed = args.seed
    if args.out is not None:
        config.out_dir = args.out
    result = training.train(config)
    losses = " ".join(f"{x:.4f}" for x in result["epoch_losses"])
    print(f"model: {result['model']}")
    print(f"epoch losses: {losses if losses else '(no epochs)'}")
    return 0


def _load_model(args):
    params = ckpt.load_checkpoint(args.model)["params"]
    sched = make_noise_schedule(args.T, args.beta1, args.betaT)
    return params, sched


def _decode_config(args, steps: int, samples: int) -> harness.DecodeConfig:
    return harness.DecodeConfig(steps=steps, samples=samples,
                                schedule=args.schedule, two_opt=args.two_opt,
                                knn=args.knn)


def _int_list(text: str) -> list[int]:
    return [int(tok) for tok in text.split(",") if tok]


def _cmd_solve(args) -> int:
    params, sched = _load_model(args)
    instances = load_instances(args.in_path)
    config = _decode_config(args, _int_list(args.steps)[0],
                            _int_list(args.samples)[0])
    solver = harness.model_solver(params, sched, config)
    solutions = [solver(inst, _instance_seed(args.seed, inst.id))
                 for inst in instances]
    harness.write_solutions(args.out, [i.id for i in instances], solutions)
    print(f"solved {len(instances)} instances into {args.out}")
    return 0


def _cmd_eval(args) -> int:
    params, sched = _load_model(args)
    instances = load_instances(args.in_path)
    unlabeled = [i.id for i in instances if i.label is None]
    if unlabeled:
        raise ValueError(f"eval needs labeled instances; missing labels: "
                         f"{unlabeled[:3]}...")
    config = _decode_config(args, _int_list(args.steps)[0],
                            _int_list(args.samples)[0])
    base = harness.model_solver(params, sched, config)
    solver = lambda inst, seed: base(inst, _instance_seed(seed, inst.id))
    seeds = tuple(_child_seed(args.seed, s) for s in range(args.eval_seeds))
    report = harness.evaluate(solver, instances, params.task, seeds=seeds)
    if args.out:
        harness.write_report(args.out, report)
    print(report.summary())
    return 0


def _cmd_sweep(args) -> int:
    params, sched = _load_model(args)
    instances = load_instances(args.in_path)
    base = harness.DecodeConfig(schedule=args.schedule, two_opt=args.two_opt,
                                knn=args.knn)
    rows = harness.sweep_grid(params, sched, instances, params.task,
                              _int_list(args.steps), _int_list(args.samples),
                              base, seed=args.seed)
    harness.write_sweep(args.out, rows)
    if args.plot_data:
        harness.emit_plot_data(rows, args.plot_data)
    print(f"swept {len(rows)} cells into {args.out}")
    return 0


def _cmd_export_heatmap(args) -> int:
    params, sched = _load_model(args)
    instances = load_instances(args.in_path)
    inf_sched = make_inference_schedule(_int_list(args.steps)[0], sched.T,
                                        args.schedule)
    ids, heatmaps, graphs = [], [], []
    for inst in instances:
        if isinstance(inst, TspInstance):
            graph = dense_graph(inst) if args.knn <= 0 \
                else sparsify(inst, args.knn)
        else:
            graph = mis_graph(inst)
        rng = np.random.default_rng(np.random.SeedSequence(
            entropy=args.seed,
            spawn_key=(zlib.crc32(inst.id.encode("utf-8")),)))
        heatmaps.append(run_reverse_chain(params, sched, inf_sched, inst,
                                          rng, graph=graph))
        graphs.append(graph)
        ids.append(inst.id)
    harness.write_heatmap(args.out, ids, heatmaps, graphs)
    print(f"exported {len(ids)} heatmaps to {args.out}")
    return 0


_COMMANDS = {
    "generate": _cmd_generate,
    "label": _cmd_label,
    "train": _cmd_train,
    "solve": _cmd_solve,
    "eval": _cmd_eval,
    "sweep": _cmd_sweep,
    "export-heatmap": _cmd_export_heatmap,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, OSError, ckpt.CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
