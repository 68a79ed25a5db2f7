"""Command-line entry point: prep, synth, train, predict, eval, gradcheck.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import functools
import json
import logging
import sys
from pathlib import Path

import click
import numpy as np

from .errors import (ConfigError, DataError, GeometryError, NumericError, ValidationError,
                     VolumeFormatError)

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


def _exits(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as exc:
            click.echo(f"config error: {exc}", err=True)
            sys.exit(EXIT_CONFIG)
        except (DataError, VolumeFormatError, GeometryError, ValidationError, FileNotFoundError) as exc:
            click.echo(f"data error: {exc}", err=True)
            sys.exit(EXIT_DATA)
        except NumericError as exc:
            click.echo(f"numeric failure: {exc}", err=True)
            sys.exit(EXIT_NUMERIC)
    return wrapper


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose):
    """Multi-scale fusion segmentation of paired PET/CT volumes."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(asctime)s %(name)s: %(message)s")


def _load_pair(ct, pet, mask=None, preprocessed=False):
    from .volume import Volume, preprocess_pair, read_volume, stack_channels
    ct_v, pet_v = read_volume(ct, canonical=True), read_volume(pet, canonical=True)
    mask_v = read_volume(mask, canonical=True) if mask else None
    if preprocessed:
        return stack_channels(ct_v, pet_v), (mask_v.voxels if mask_v else None), ct_v
    pre = preprocess_pair(ct_v, pet_v, mask_v)
    ref = Volume(np.zeros(pre.grid.shape, np.float32), pre.grid.origin, pre.grid.spacing)
    return pre.image, pre.mask, ref


@main.command()
@click.option("--ct", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--pet", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--mask", type=click.Path(exists=True, dir_okay=False), help="Optional label volume.")
@click.option("--out-dir", required=True, type=click.Path(file_okay=False))
@click.option("--case-id", required=True)
@_exits
def prep(ct, pet, mask, out_dir, case_id):
    """Align a raw CT/PET pair on its common grid and rescale intensities to [0, 1]."""
    from .dataset import case_paths
    from .volume import write_volume
    image, m, ref = _load_pair(ct, pet, mask)
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    paths = case_paths(out_dir, case_id)
    write_volume(ref.with_voxels(image[0], "ct"), paths["ct"])
    write_volume(ref.with_voxels(image[1], "pet"), paths["pet"])
    if m is not None:
        write_volume(ref.with_voxels(m, "mask"), paths["mask"])
    click.echo(f"wrote {case_id} on grid {ref.size} to {out_dir}")


@main.command()
@click.option("--out-dir", required=True, type=click.Path(file_okay=False))
@click.option("--n", "n_cases", default=5, show_default=True, type=int)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--extent", default=48, show_default=True, type=int, help="Cube side in voxels.")
@_exits
def synth(out_dir, n_cases, seed, extent):
    """Generate raw synthetic PET/CT cases with ground-truth masks."""
    from .dataset import save_raw_case, synth_raw
    if n_cases < 1:
        raise ConfigError("--n must be >= 1")
    for cid, ct, pet, mask in synth_raw(n_cases, seed, (extent,) * 3):
        save_raw_case(out_dir, cid, ct, pet, mask)
    click.echo(f"wrote {n_cases} cases to {out_dir}")


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--data", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out-dir", required=True, type=click.Path(file_okay=False))
@click.option("--preprocessed", is_flag=True, help="Data directory holds output of `prep`.")
@_exits
def train(config_path, data, out_dir, preprocessed):
    """Train a model; writes best.h3ck, history.csv and validation.csv."""
    from .config import load_config
    from .dataset import Case, case_paths, list_case_ids, load_cases
    from .train import train as run_train
    model_cfg, train_cfg = load_config(config_path)
    if preprocessed:
        cases = []
        for cid in list_case_ids(data):
            p = case_paths(data, cid)
            image, m, _ = _load_pair(p["ct"], p["pet"], p["mask"], preprocessed=True)
            cases.append(Case(cid, image, m))
    else:
        cases = load_cases(data)
    result = run_train(model_cfg, train_cfg, cases, out_dir)
    click.echo(json.dumps({"checkpoint": str(result.checkpoint), "best_score": result.state.best_score,
                           "train_ids": result.train_ids, "val_ids": result.val_ids}))


@main.command()
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--ct", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--pet", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out-prob", required=True, type=click.Path(dir_okay=False))
@click.option("--out-mask", required=True, type=click.Path(dir_okay=False))
@click.option("--overlap", default=0.5, show_default=True, type=float)
@click.option("--preprocessed", is_flag=True)
@_exits
def predict(checkpoint, ct, pet, out_prob, out_mask, overlap, preprocessed):
    """Sliding-window inference; writes probabilities (2 channels stacked on z) and labels."""
    from .segnet import load_checkpoint, predict_mask, sliding_window_infer
    from .volume import write_volume
    model, _ = load_checkpoint(checkpoint)
    image, _, ref = _load_pair(ct, pet, preprocessed=preprocessed)
    probs = sliding_window_infer(model.predict, image, model.cfg.patch, overlap)
    # H3V is scalar, so the GTVp and GTVn channels are stacked along z
    write_volume(ref.with_voxels(np.concatenate([probs[0], probs[1]], axis=0), "prob"), out_prob)
    write_volume(ref.with_voxels(predict_mask(probs), "mask"), out_mask)
    click.echo(f"wrote {out_prob} and {out_mask}")


@main.command(name="eval")
@click.option("--pred", "pred_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--gt", "gt_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out-json", required=True, type=click.Path(dir_okay=False))
@click.option("--out-csv", required=True, type=click.Path(dir_okay=False))
@_exits
def evaluate_cmd(pred_dir, gt_dir, out_json, out_csv):
    """Score ``<case>_mask.h3v`` predictions against ground truth of the same name."""
    from .metrics import evaluate
    from .volume import read_volume, resample
    pred_ids = {p.name[:-len("_mask.h3v")] for p in Path(pred_dir).glob("*_mask.h3v")}
    gt_ids = {p.name[:-len("_mask.h3v")] for p in Path(gt_dir).glob("*_mask.h3v")}
    if not pred_ids or pred_ids != gt_ids:
        raise DataError(f"prediction and ground-truth case ids differ: "
                        f"{sorted(pred_ids ^ gt_ids) or 'no cases found'}")
    cases = {}
    for cid in sorted(pred_ids):
        pred = read_volume(Path(pred_dir) / f"{cid}_mask.h3v", canonical=True)
        gt = read_volume(Path(gt_dir) / f"{cid}_mask.h3v", canonical=True)
        if not gt.grid.same_as(pred.grid):
            gt = resample(gt, pred.grid)
        cases[cid] = (pred.voxels, gt.voxels)
    report = evaluate(cases)
    report.write(out_json, out_csv)
    click.echo(f"mean aggregated DSC {report.mean_aggregated:.4f} "
               f"(GTVp {report.classwise['GTVp']:.4f}, GTVn {report.classwise['GTVn']:.4f})")


@main.command()
@click.option("--seed", default=0, show_default=True, type=int)
@_exits
def gradcheck(seed):
    """Finite-difference check of every op and both fusion blocks."""
    from .verify import run_suite
    results = run_suite(seed=seed, report=lambda r: click.echo(str(r)))
    failed = [r.name for r in results if not r.passed]
    click.echo(f"{len(results) - len(failed)}/{len(results)} passed")
    if failed:
        raise NumericError(f"gradcheck failed for: {failed}")


if __name__ == "__main__":
    main()
