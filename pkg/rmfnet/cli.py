"""
Command-line interface.

Every command reads an optional JSON config, applies ``--set key.path=value``
overrides and explicit flags, writes the resolved config to its output
directory and returns an exit code: 0 on success, 2 for invalid input and 1
for runtime failures.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import numpy as np
import torch

from rmfnet import __version__
from rmfnet.config import apply_overrides, configure_logging, load_run_config, run_directory
from rmfnet.cryorecon import (
    EPOCH_PRESETS,
    ProjectionRenderer,
    RayGrid,
    ReconConfig,
    RenderContext,
    bake_volume,
    batch_loss,
    frequency_marching_reconstruct,
    fsc_curve,
    pose_error_stats,
    save_fsc,
    save_fsc_plot,
    save_pose_histogram_plot,
)
from rmfnet.cryosim import (
    PSFParams,
    generate_dataset,
    load_stack,
    make_blob_phantom,
    make_sphere_phantom,
    read_volume,
    save_stack,
    write_volume,
)
from rmfnet.diffcore import DTYPE, ParamSet, grad_check, module_program
from rmfnet.imagefit import ImageExperimentConfig, load_image, run_image_experiment
from rmfnet.model import RMFN, ModelConfig, eval_on_grid, grid_coordinates, load_checkpoint, save_checkpoint
from rmfnet.spectral import (
    dft_magnitude,
    enumerate_spectrum,
    psnr,
    save_spectrum_json,
    save_spectrum_png,
)
from rmfnet.so3 import random_unit_vectors, sample_uniform_rotation
from rmfnet.trainer import TrainingLog


logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


class UsageError(ValueError):
    """Invalid command line."""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _set(config: Dict[str, Any], key: str, value: Any) -> None:
    if value is not None:
        config[key] = value


def _int_list(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(',')]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{text}'") from e


def _write_json(path: Path, data: Any) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True))


def cmd_fit_image(args: argparse.Namespace, config: Dict[str, Any]) -> int:
    _set(config, 'image', args.image)
    _set(config, 'baselines', args.baselines or None)
    config['seed'] = args.seed
    cfg = ImageExperimentConfig.from_dict(config)
    with run_directory(args.out, args.command, cfg.to_dict(), args.seed) as out:
        report = run_image_experiment(cfg, out)
    print(json.dumps(report['psnr'], sort_keys=True))
    return EXIT_OK


def cmd_spectrum(args: argparse.Namespace, config: Dict[str, Any]) -> int:
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)
    else:
        model = RMFN(ModelConfig.from_dict(config.get('model', {})), np.random.default_rng(args.seed))
    grid = args.grid or int(4 * np.ceil(model.config.b_max))
    grid_shape = (grid,) * model.config.d_in

    with run_directory(args.out, args.command, {'model': model.config.to_dict(), 'grid': grid}, args.seed) as out:
        summary: Dict[str, Any] = {'band_limits': list(model.band_limits), 'grid': grid}
        for k in range(1, model.layers + 1):
            spectrum = dft_magnitude(eval_on_grid(model, k, grid_shape), spatial_dims=model.config.d_in)
            save_spectrum_json(spectrum, out / f"scale{k}_spectrum.json")
            if model.config.d_in <= 2:
                save_spectrum_png(spectrum, out / f"scale{k}_spectrum.png", f"scale {k}")
        if args.layer is not None:
            terms = enumerate_spectrum(model, args.unit, args.layer)
            summary['terms'] = [
                {'amplitude': t.amplitude, 'freq': t.freq.tolist(), 'phase': t.phase,
                 'indices': list(t.indices), 'signs': list(t.signs)}
                for t in terms
            ]
        _write_json(out / 'spectrum.json', summary)
        if not args.checkpoint:
            save_checkpoint(model, out / 'model.pt')
    return EXIT_OK


def cmd_simulate(args: argparse.Namespace, config: Dict[str, Any]) -> int:
    _set(config, 'n', args.n)
    _set(config, 'snr', args.snr)
    _set(config, 'size', args.size)
    _set(config, 'phantom', args.phantom)
    config.setdefault('n', 1000)
    config.setdefault('snr', 0.1)
    config.setdefault('size', 32)
    config.setdefault('voxel_size', 1.0)
    config.setdefault('phantom', 'blob')
    psf = PSFParams.from_dict(config.setdefault('psf', {'kind': 'gaussian', 'sigma': 1.0}))
    rng = np.random.default_rng(args.seed)

    if args.vol:
        vol = read_volume(args.vol)
        config['phantom'] = str(args.vol)
    elif config['phantom'] == 'blob':
        vol = make_blob_phantom(int(config['size']), rng, voxel_size=float(config['voxel_size']))
    elif config['phantom'] == 'sphere':
        vol = make_sphere_phantom(int(config['size']), voxel_size=float(config['voxel_size']))
    else:
        raise ValueError(f"Unknown phantom '{config['phantom']}'; expected blob, sphere or --vol")

    with run_directory(args.out, args.command, config, args.seed) as out:
        stack = generate_dataset(vol, int(config['n']), psf, float(config['snr']), args.seed,
                                 workers=args.threads)
        write_volume(out / 'ground_truth.mrc', vol)
        save_stack(stack, out / 'particles.mrcs')
    return EXIT_OK


def cmd_reconstruct(args: argparse.Namespace, config: Dict[str, Any]) -> int:
    if args.stages is not None:
        config.setdefault('model', {})['layers'] = args.stages
    _set(config, 'epochs', args.epochs)
    _set(config, 'preset', args.preset)
    _set(config, 'known_poses', args.known_poses or None)
    _set(config, 'single_scale', args.single_scale or None)
    config['seed'] = args.seed
    cfg = ReconConfig.from_dict(config)
    stack = load_stack(args.stack)
    gt_volume = read_volume(args.gt_volume) if args.gt_volume else None

    with run_directory(args.out, args.command, cfg.to_dict(), args.seed) as out:
        with TrainingLog(out / 'history.jsonl') as log:
            result = frequency_marching_reconstruct(stack, cfg, log=log)
        save_checkpoint(result.model, out / 'model.pt')
        curves = {}
        for k in range(1, result.model.layers + 1):
            vol = bake_volume(result.model, k, stack.size, stack.pixel_size)
            write_volume(out / f"volume_scale{k}.mrc", vol)
            if gt_volume is not None:
                curves[f"scale {k}"] = fsc_curve(vol, gt_volume, stack.pixel_size)
                save_fsc(curves[f"scale {k}"], out / f"fsc_scale{k}.json")
        if curves:
            save_fsc_plot(curves, out / 'fsc.png')
        if stack.poses is not None:
            stats = pose_error_stats(result.poses.effective(), stack.poses)
            _write_json(out / 'pose_errors.json', stats)
            save_pose_histogram_plot(stats, out / 'pose_errors.png')
            logger.info(f"Median pose error {stats['median_deg']:.2f} deg, "
                        f"{100 * stats['fraction_within_5deg']:.1f}% within 5 deg")
    return EXIT_OK


def cmd_fsc(args: argparse.Namespace, config: Dict[str, Any]) -> int:
    a, b = read_volume(args.volumes[0]), read_volume(args.volumes[1])
    curve = fsc_curve(a, b, args.voxel_size)
    with run_directory(args.out, args.command, {'volumes': args.volumes, 'voxel_size': curve.voxel_size},
                       args.seed) as out:
        save_fsc(curve, out / 'fsc.json')
        save_fsc_plot({'fsc': curve}, out / 'fsc.png')
    print(json.dumps({'resolution_0.5': curve.resolution_at(0.5), 'auc': curve.auc()}))
    return EXIT_OK


def cmd_psnr(args: argparse.Namespace, config: Dict[str, Any]) -> int:
    pred, target = load_image(args.images[0]), load_image(args.images[1])
    value = psnr(pred, target, args.peak)
    with run_directory(args.out, args.command, {'images': args.images, 'peak': args.peak}, args.seed) as out:
        _write_json(out / 'psnr.json', {'psnr_db': value})
    print(json.dumps({'psnr_db': value}))
    return EXIT_OK


def _gradcheck_programs(seed: int) -> Dict[str, Any]:
    """Small rMFN and rendering programs with their parameter sets and inputs."""
    rng = np.random.default_rng(seed)
    programs: Dict[str, Any] = {}

    model = RMFN(ModelConfig(d_in=2, d_h=4, layers=3, b_max=27.0, lambda1=0.0, lambda2=2.0), rng)
    coords = torch.as_tensor(grid_coordinates((5, 5)), dtype=DTYPE)
    targets = [torch.as_tensor(rng.standard_normal((25, 1)), dtype=DTYPE) for _ in range(model.layers)]

    def multiscale_mse(outputs: List[torch.Tensor]) -> torch.Tensor:
        return sum(torch.mean((y - t) ** 2) for y, t in zip(outputs, targets))

    programs['rmfn_multiscale_mse'] = (module_program(model, multiscale_mse), ParamSet.from_module(model), coords)

    field = RMFN(ModelConfig(d_in=3, d_h=3, layers=2, b_max=4.0, quantize=False), rng)
    rays = RayGrid(6, mask_radius=0.5)
    context = RenderContext(rays, 1.0, torch.as_tensor(PSFParams('gaussian', 0.5).kernel(1.0), dtype=DTYPE))
    renderer = ProjectionRenderer(field, sample_uniform_rotation(rng, 2), rng.uniform(0.2, 0.8, 2),
                                  random_unit_vectors(rng, 2), 2, context)
    images = torch.as_tensor(rng.standard_normal((2, 6, 6)), dtype=DTYPE)
    programs['render_projection'] = (
        module_program(renderer, lambda pred: batch_loss(pred, images)),
        ParamSet.from_module(renderer),
        rays.points,
    )
    return programs


def cmd_gradcheck(args: argparse.Namespace, config: Dict[str, Any]) -> int:
    rel_tol = float(config.get('rel_tol', args.rel_tol))
    step = float(config.get('step', 1e-5))
    reports = {}
    for name, (program, params, inputs) in _gradcheck_programs(args.seed).items():
        reports[name] = grad_check(program, params, inputs, rel_tol, step).to_dict()
        logger.info(f"{name}: max_rel_err={reports[name]['max_rel_err']:.3e} pass={reports[name]['pass']}")
    passed = all(r['pass'] for r in reports.values())
    with run_directory(args.out, args.command, {'rel_tol': rel_tol, 'step': step}, args.seed) as out:
        _write_json(out / 'gradcheck.json', {'pass': passed, 'programs': reports})
    print(json.dumps({'pass': passed}))
    return EXIT_OK if passed else EXIT_FAILURE


COMMANDS: Dict[str, Callable[[argparse.Namespace, Dict[str, Any]], int]] = {
    'fit-image': cmd_fit_image,
    'spectrum': cmd_spectrum,
    'simulate': cmd_simulate,
    'reconstruct': cmd_reconstruct,
    'fsc': cmd_fsc,
    'psnr': cmd_psnr,
    'gradcheck': cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument('--config', help='JSON config file')
    common.add_argument('--set', dest='overrides', action='append', default=[], metavar='KEY.PATH=VALUE',
                        help='override a config value (repeatable)')
    common.add_argument('--seed', type=int, default=0)
    common.add_argument('--out', default='out', help='output directory')
    common.add_argument('--threads', type=int, default=1, help='CPU threads')

    parser = _Parser(prog='rmfnet', description='Residual multiplicative filter networks')
    parser.add_argument('--version', action='version', version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest='command', required=True, parser_class=_Parser)

    p = sub.add_parser('fit-image', parents=[common], help='staged 2D image fitting')
    p.add_argument('--image', help='PNG image; a synthetic band-limited image when omitted')
    p.add_argument('--baselines', action='store_true', help='also run fair-staged and non-staged arms')

    p = sub.add_parser('spectrum', parents=[common], help='dump output spectra and sine terms')
    p.add_argument('--checkpoint', help='model checkpoint; a seeded random model when omitted')
    p.add_argument('--grid', type=int, help='samples per axis')
    p.add_argument('--layer', type=int, help='enumerate the sine terms of this layer')
    p.add_argument('--unit', type=int, default=0, help='hidden unit for --layer')

    p = sub.add_parser('simulate', parents=[common], help='simulate a particle stack')
    p.add_argument('--vol', help='MRC density map; a synthetic phantom when omitted')
    p.add_argument('--phantom', choices=('blob', 'sphere'))
    p.add_argument('--size', type=int, help='phantom extent')
    p.add_argument('--n', type=int, help='number of images')
    p.add_argument('--snr', type=float)

    p = sub.add_parser('reconstruct', parents=[common], help='frequency-marching reconstruction')
    p.add_argument('--stack', required=True, help='MRC stack with sidecar JSON')
    p.add_argument('--gt-volume', help='ground-truth MRC map for FSC')
    p.add_argument('--stages', type=int, help='number of scales')
    p.add_argument('--epochs', type=_int_list, help='epochs per stage, e.g. 15,15,70')
    p.add_argument('--preset', choices=sorted(EPOCH_PRESETS))
    p.add_argument('--known-poses', action='store_true', help='keep ground-truth poses fixed')
    p.add_argument('--single-scale', action='store_true', help='supervise only the finest scale')

    p = sub.add_parser('fsc', parents=[common], help='Fourier shell correlation of two maps')
    p.add_argument('volumes', nargs=2)
    p.add_argument('--voxel-size', type=float)

    p = sub.add_parser('psnr', parents=[common], help='PSNR of two images')
    p.add_argument('images', nargs=2)
    p.add_argument('--peak', type=float, default=1.0)

    p = sub.add_parser('gradcheck', parents=[common], help='check analytic gradients')
    p.add_argument('--rel-tol', type=float, default=1e-4)

    return parser


def run(argv: Optional[List[str]] = None) -> int:
    """
    Parse arguments and run one command.

    Returns:
        Exit code: 0 on success, 2 on invalid input, 1 on runtime failure.
    """
    try:
        args = build_parser().parse_args(argv)
        config = apply_overrides(load_run_config(args.config), args.overrides)
    except (UsageError, ValueError, OSError) as e:
        print(f"rmfnet: error: {e}", file=sys.stderr)
        return EXIT_USAGE

    torch.set_num_threads(max(1, args.threads))
    try:
        return COMMANDS[args.command](args, config)
    except ValueError as e:
        logger.warning(f"Validation error in '{args.command}': {e}")
        return EXIT_USAGE
    except Exception as e:
        logger.error(f"Command '{args.command}' failed: {e}", exc_info=True)
        return EXIT_FAILURE


def main() -> None:
    configure_logging()
    sys.exit(run())
