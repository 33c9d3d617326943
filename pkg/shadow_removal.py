#!/usr/bin/env python3
"""
Portrait shadow removal command-line tool
Synthesizes the toy-portrait corpus, trains SE-Net, the inpainting model and
the detail model, runs structure-guided shadow removal and evaluates results

Subcommands:
- synth-data: paired SE-Net dataset plus held-out shadow pairs
- train-senet / train-inpaint / train-detail: the three trainable stages
- infer: shadow removal for one image or a directory
- eval: region-wise SSIM / perceptual / LAB RMSE report
- structure-teacher, refine-mask: standalone inspection tools
"""

import os
import sys
import argparse
import logging
from logging.handlers import TimedRotatingFileHandler

from constants import CONFIG_FILE, LOG_FILE, INTERMEDIATE_FILES
from imaging import ImageFileError, load_image, load_mask, save_image, save_mask
from model_state import CheckpointError, UntrainedModelError
from toyface_data import DatasetError, SYNTHESIS_STRATEGIES, read_dataset
from structure_teacher import extract_structure_teacher
from mask_refine import refine_mask, composite_update
from metrics import evaluate_directories, format_report_table, write_report_jsonl
from pipeline import (
    ConfigError, PipelineConfig, ShadowRemovalPipeline, load_config, synthesize_data,
    train_senet_stage, train_inpaint_stage, train_detail_stage
)

logger = logging.getLogger("shadow_removal")

CHECKPOINT_NAMES = {
    "senet_checkpoint": "senet.pt",
    "discriminator_checkpoint": "discriminator.pt",
    "inpaint_checkpoint": "inpaint.pt",
    "detail_checkpoint": "detail.pt"
}


def setup_logging(verbose: bool = False):
    """Console plus daily-rotated file logging (7 days retention)"""
    log_format = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

    console_handler = logging.StreamHandler()
    console_handler.setFormatter(logging.Formatter(log_format))

    file_handler = TimedRotatingFileHandler(
        filename=LOG_FILE,
        when="midnight",
        interval=1,
        backupCount=7,
        encoding="utf-8",
        delay=False
    )
    file_handler.setFormatter(logging.Formatter(log_format))
    file_handler.suffix = "%Y-%m-%d"

    root_logger = logging.getLogger()
    root_logger.setLevel(logging.DEBUG if verbose else logging.INFO)
    root_logger.addHandler(console_handler)
    root_logger.addHandler(file_handler)


def resolve_config(path: str) -> PipelineConfig:
    """Load the config file; the default file name may be absent, in which case defaults apply"""
    if path == CONFIG_FILE and not os.path.exists(path):
        logger.warning("Configuration file '%s' not found, using built-in defaults", path)
        return PipelineConfig()
    return load_config(path)


def use_checkpoint_dir(config: PipelineConfig, directory: str):
    for key, name in CHECKPOINT_NAMES.items():
        config.paths[key] = os.path.join(directory, name)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shadow_removal", description="Structure-guided portrait shadow removal")
    parser.add_argument("--verbose", action="store_true", help="Log debug messages")
    commands = parser.add_subparsers(dest="command", required=True)

    def add_command(name: str, help_text: str) -> argparse.ArgumentParser:
        sub = commands.add_parser(name, help=help_text)
        sub.add_argument("--config", default=CONFIG_FILE, help="JSON configuration file")
        sub.add_argument("--seed", type=int, default=None, help="Override the stage seed")
        sub.add_argument("--out", default=None, help="Output directory")
        return sub

    synth = add_command("synth-data", "Generate the paired toy-portrait dataset")
    synth.add_argument("--n", type=int, default=None, help="Number of training samples")
    synth.add_argument("--strategy", choices=SYNTHESIS_STRATEGIES, default=None)
    synth.add_argument("--eval-pairs", type=int, default=None, help="Held-out shadow pairs to write")
    synth.add_argument("--portraits", default=None,
                       help="Directory of *clean.png portraits to relight instead of toy faces")

    for name, help_text in (("train-senet", "Train the structure extraction network"),
                            ("train-inpaint", "Train the structure-guided inpainting model"),
                            ("train-detail", "Train the detail restoration model")):
        train = add_command(name, help_text)
        train.add_argument("--data", default=None, help="Dataset root (default paths.data_dir)")
        train.add_argument("--max-steps", type=int, default=None, help="Stop after this many optimizer steps")
        if name == "train-inpaint":
            train.add_argument("--no-structure", action="store_true", help="Train without the structure condition")

    infer = add_command("infer", "Remove shadows from an image or a directory of images")
    infer.add_argument("--input", required=True, help="Input PNG or directory")
    infer.add_argument("--mask", required=True, help="Shadow mask PNG or directory of same-named masks")
    infer.add_argument("--checkpoints", default=None, help="Directory holding senet.pt, inpaint.pt and detail.pt")
    infer.add_argument("--skip-detail", action="store_true", help="Stop after mask refinement")
    infer.add_argument("--steps", type=int, default=None, help="DDIM steps per diffusion stage")

    evaluate = add_command("eval", "Evaluate results against ground truth")
    evaluate.add_argument("--results", required=True, help="Directory of result PNGs")
    evaluate.add_argument("--gt", required=True, help="Directory of same-named ground truth PNGs")
    evaluate.add_argument("--masks", required=True, help="Directory of same-named shadow masks")

    teacher = add_command("structure-teacher", "Write the analytic structure map of an image")
    teacher.add_argument("--input", required=True, help="Input PNG")

    refine = add_command("refine-mask", "Refine a shadow mask from an input and a shadow-removed result")
    refine.add_argument("--input", required=True, help="Shadowed input PNG")
    refine.add_argument("--removed", required=True, help="Shadow-removed PNG")
    return parser


def cmd_synth_data(args, config: PipelineConfig) -> int:
    if args.eval_pairs is not None:
        config.data["eval_pairs"] = args.eval_pairs
    seed = config.seeds["data"] if args.seed is None else args.seed
    out_dir = args.out or config.paths["data_dir"]
    synthesize_data(config, out_dir, seed, args.n, args.strategy, args.portraits)
    print(f"Dataset written to {out_dir}")
    return 0


def cmd_train(args, config: PipelineConfig) -> int:
    if args.out:
        use_checkpoint_dir(config, args.out)
    samples = read_dataset(args.data or config.paths["data_dir"], "train")
    if args.command == "train-senet":
        if args.max_steps is not None:
            config.senet.max_steps = args.max_steps
        seed = config.seeds["senet"] if args.seed is None else args.seed
        state, _ = train_senet_stage(config, samples, seed)
    elif args.command == "train-inpaint":
        if args.max_steps is not None:
            config.inpaint.max_steps = args.max_steps
        if args.no_structure:
            config.inpaint.use_condition = False
        seed = config.seeds["inpaint"] if args.seed is None else args.seed
        state = train_inpaint_stage(config, samples, seed)
    else:
        if args.max_steps is not None:
            config.detail.max_steps = args.max_steps
        seed = config.seeds["detail"] if args.seed is None else args.seed
        state = train_detail_stage(config, samples, seed)
    print(f"Trained {state.kind} for {state.step} steps")
    return 0


def cmd_infer(args, config: PipelineConfig) -> int:
    if args.checkpoints:
        use_checkpoint_dir(config, args.checkpoints)
    if args.steps is not None:
        config.sampler["inpaint_steps"] = args.steps
        config.sampler["detail_steps"] = args.steps
    out_dir = args.out or config.paths["output_dir"]
    pipeline = ShadowRemovalPipeline.from_checkpoints(config, skip_detail=args.skip_detail)
    if os.path.isdir(args.input):
        written = pipeline.infer_directory(args.input, args.mask, out_dir, args.seed, args.skip_detail)
        print(f"Wrote {len(written)} results to {out_dir}")
        return 0
    output = pipeline.infer(load_image(args.input), load_mask(args.mask), args.seed, args.skip_detail)
    if config.pipeline["save_intermediates"]:
        output.save(out_dir)
    else:
        save_image(output.result, os.path.join(out_dir, INTERMEDIATE_FILES["result"]))
    print(f"Result written to {os.path.join(out_dir, INTERMEDIATE_FILES['result'])}")
    return 0


def cmd_eval(args, config: PipelineConfig) -> int:
    rows, summary = evaluate_directories(args.results, args.gt, args.masks)
    print(format_report_table(rows, summary))
    out_dir = args.out or config.paths["output_dir"]
    write_report_jsonl(os.path.join(out_dir, "report.jsonl"), rows, summary)
    return 0


def cmd_structure_teacher(args, config: PipelineConfig) -> int:
    structure = extract_structure_teacher(load_image(args.input))
    path = os.path.join(args.out or config.paths["output_dir"], INTERMEDIATE_FILES["structure"])
    save_image(structure, path)
    print(f"Structure map written to {path}")
    return 0


def cmd_refine_mask(args, config: PipelineConfig) -> int:
    I_in, I_removed = load_image(args.input), load_image(args.removed)
    refined = refine_mask(I_in, I_removed)
    out_dir = args.out or config.paths["output_dir"]
    save_mask(refined, os.path.join(out_dir, INTERMEDIATE_FILES["refined_mask"]))
    save_image(composite_update(I_in, I_removed, refined), os.path.join(out_dir, INTERMEDIATE_FILES["updated"]))
    print(f"Refined mask covers {100.0 * refined.coverage():.1f}% of the image")
    return 0


COMMANDS = {
    "synth-data": cmd_synth_data,
    "train-senet": cmd_train,
    "train-inpaint": cmd_train,
    "train-detail": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "structure-teacher": cmd_structure_teacher,
    "refine-mask": cmd_refine_mask
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.verbose)
    logger.info("Running %s", args.command)
    try:
        config = resolve_config(args.config)
        return COMMANDS[args.command](args, config)
    except (ConfigError, CheckpointError, UntrainedModelError, DatasetError, ImageFileError,
            ValueError, OSError) as e:
        logger.error("%s failed: %s", args.command, e)
        print(f"Error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
