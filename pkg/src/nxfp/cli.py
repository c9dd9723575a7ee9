import argparse
import json
import logging
import math
import re
import sys
import time
from pathlib import Path

import numpy as np
import pandas as pd

from . import analysis as analysis
from . import container as container
from . import dequant as dequant
from . import errors
from . import helper as helper
from . import ingest as ingest
from . import quant as quant
from . import save_data as save_data

'''
Command line: quantize, dequantize, inspect, analyze, sweep, compare.

Exit codes: 0 success, 1 usage error, 2 io/format error, 3 numeric-input error (NaN/Inf).
'''

FORMAT_RE = re.compile(r'^(mxfp|nxfp|bfp)(\d)(?:-e(\d)m(\d))?$')
DEFAULT_SYNTH_N = 4096
EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class ArgumentParser(argparse.ArgumentParser):
    '''
    argparse parser that raises UsageError instead of exiting, so main() owns the exit code
    '''
    def error(self, message):
        raise UsageError(message)


def parse_format_spec(s:str, block_size:int=quant.DEFAULT_BLOCK_SIZE)->quant.QuantConfig:
    '''
    Format spec string -> QuantConfig.

    "mxfp4" -> E2M1, no NxFP features; "nxfp4" -> E2M1 with NanoMantissa, Adaptive Microexponent and Code
    Recycling; "bfp4" -> microexp_bits 0; "mxfp6-e2m3" picks the microexponent width explicitly and keeps the
    family, so "nxfp4-e0m3" is BFP4 with NanoMantissa and Code Recycling.
    Without a suffix the E2 family is used (E1M1 for 3-bit elements).
    '''
    if not s or not str(s).strip():
        raise errors.ConfigError('Empty format spec')
    m = FORMAT_RE.match(str(s).strip().lower())
    if m is None:
        raise errors.ConfigError(f'Unable to parse format spec: {s}')
    family, bits = m.group(1), int(m.group(2))
    microexp = None
    if m.group(3) is not None:
        e, mant = int(m.group(3)), int(m.group(4))
        if 1 + e + mant != bits:
            raise errors.ConfigError(f'{s}: E{e}M{mant} is not a {bits}-bit element')
        if family == 'bfp' and e != 0:
            raise errors.ConfigError(f'{s}: BFP elements have no microexponent')
        microexp = e
    return quant.preset_config(family, bits, block_size, microexp_bits=microexp)

def build_config(args)->quant.QuantConfig:
    '''
    Format spec plus the feature flags of a parsed command line
    '''
    return apply_flags(parse_format_spec(args.format, block_size=args.block_size), args)

def apply_flags(cfg:quant.QuantConfig, args)->quant.QuantConfig:
    changes = {}
    if args.no_nano:
        changes['nano_enabled'] = False
    if args.no_adaptive:
        changes['adaptive_enabled'] = False
    if args.no_recycle:
        changes['recycle_enabled'] = False
    if args.recycle_rule is not None:
        changes['recycle_rule'] = args.recycle_rule
    if args.nano_search is not None:
        changes['nano_search'] = args.nano_search
    return cfg.replace(**changes) if changes else cfg

def tensor_source(args, block_size:int)->ingest.TensorSource:
    if args.synth is not None:
        if args.seed is None:
            raise UsageError('--seed is required with --synth')
        shape = helper.parse_shape(args.shape) if args.shape else None
        n = args.n if args.n is not None else (math.prod(shape) if shape else DEFAULT_SYNTH_N)
        return ingest.TensorSource('synthetic', model=args.synth, n=n, seed=args.seed, block_size=block_size, shape=shape)
    if args.input is None:
        raise UsageError('an input is required: --in PATH or --synth MODEL --seed N')
    path = Path(args.input)
    kind = {'.npy': 'npy', '.safetensors': 'safetensors'}.get(path.suffix.lower(), 'raw')
    return ingest.TensorSource(kind, path=str(path), dtype=args.dtype, shape=args.shape, name=args.tensor_name)

def read_tensor(args, cfg:quant.QuantConfig)->np.ndarray:
    return ingest.load_tensor(tensor_source(args, cfg.block_size))

def tensor_label(args)->str:
    if args.synth is not None:
        return f'{args.synth}-seed{args.seed}'
    return args.tensor_name or Path(args.input).stem

def require_out(args):
    if args.out is None:
        raise UsageError(f'{args.command} needs --out')
    return Path(args.out)

def emit_frame(df:pd.DataFrame, out)->None:
    '''
    CSV to the --out path, or to stdout without one
    '''
    if out is None:
        sys.stdout.write(df.to_csv(index=False, float_format=save_data.FLOAT_FORMAT))
    else:
        save_data.write_csv(df, out)

def fmt_num(x)->str:
    return f'{float(x):.9g}'

def cmd_quantize(args)->int:
    cfg = build_config(args)
    out = require_out(args)
    values = read_tensor(args, cfg)
    packed = quant.quantize_tensor(values, cfg)
    size = container.save(packed, out)
    report = analysis.error_report(values, packed, tensor=tensor_label(args))
    print(f'format: {cfg.label}')
    print(f'blocks: {packed.n_blocks}')
    print(f'bits_per_element: {fmt_num(container.footprint_bits_per_element(cfg))}')
    print(f'footprint_bits: {container.footprint_bits(packed)}')
    print(f'file_bytes: {size}')
    print(f'mse: {fmt_num(report["mse"])}')
    if args.input is not None and Path(args.input).suffix.lower() == '.safetensors':
        inventory = {name: shape for name, (_, shape) in ingest.list_tensors(args.input).items()}
        total = container.model_footprint(inventory, cfg).iloc[-1]
        print(f'model_footprint_bytes: {int(total["footprint_bytes"])}')
    return EXIT_OK

def cmd_dequantize(args)->int:
    if args.input is None:
        raise UsageError('dequantize needs --in FILE.nxt')
    out = require_out(args)
    packed = container.load(args.input)
    values = dequant.dequantize_tensor(packed, args.target)
    ingest.write_npy(out, values)
    return EXIT_OK

def describe(packed:container.PackedTensor, file_bytes:int=None)->list:
    '''
    key: value lines printed by inspect
    '''
    lines = [f'format: {packed.cfg.label}']
    lines += [line.replace('=', ': ', 1) for line in container.header_text(packed).splitlines()]
    nonzero = packed.e_shared != quant.ZERO_BLOCK
    lines.append(f'blocks: {packed.n_blocks}')
    lines.append(f'bits_per_element: {fmt_num(container.footprint_bits_per_element(packed.cfg))}')
    lines.append(f'footprint_bits: {container.footprint_bits(packed)}')
    if file_bytes is not None:
        lines.append(f'file_bytes: {file_bytes}')
    lines.append(f'zero_blocks: {int(np.sum(~nonzero))}')
    if nonzero.any():
        lines.append(f'e_shared_min: {int(packed.e_shared[nonzero].min())}')
        lines.append(f'e_shared_max: {int(packed.e_shared[nonzero].max())}')
        bfp_fraction = helper.exact_mean(packed.fmt[nonzero] == 0)
    else:
        lines += ['e_shared_min: none', 'e_shared_max: none']
        bfp_fraction = 0.0
    hist = np.bincount(packed.m_nano[nonzero], minlength=len(quant.NANO_FACTORS))
    lines.append(f'm_nano_histogram: {",".join(str(int(c)) for c in hist)}')
    lines.append(f'bfp_fraction: {fmt_num(bfp_fraction)}')
    return lines

def cmd_inspect(args)->int:
    if args.input is None:
        raise UsageError('inspect needs --in FILE.nxt')
    data = Path(args.input).read_bytes()
    packed = container.deserialize(data)
    print('\n'.join(describe(packed, len(data))))
    return EXIT_OK

def cmd_analyze(args)->int:
    cfg = build_config(args)
    out = require_out(args)
    values = read_tensor(args, cfg)
    label = tensor_label(args)
    report = analysis.ablation_sweep(values, cfg.element_bits, cfg.block_size, microexp_bits=cfg.microexp_bits or None, tensor=label)
    hist = analysis.profile_scaled_distribution(values, cfg)
    save_data.write_csv(report, out / 'report.csv')
    save_data.write_csv(hist.to_frame(), out / 'histogram.csv')
    save_data.write_csv(pd.DataFrame([hist.summary()]), out / 'profile.csv')
    for key, value in hist.summary().items():
        print(f'{key}: {fmt_num(value)}')
    return EXIT_OK

def cmd_sweep(args)->int:
    if args.config is not None:
        out = require_out(args)
        run_experiments(args.config, out, only=helper.split_list(args.experiments) if args.experiments else None)
        return EXIT_OK
    if args.sweep is None:
        raise UsageError('sweep needs --sweep KIND or --config FILE')
    cfg = build_config(args)
    values = read_tensor(args, cfg)
    df = analysis.sweep_dispatcher(args.sweep, values, cfg, tensor=tensor_label(args))
    emit_frame(df, args.out)
    return EXIT_OK

def cmd_compare(args)->int:
    specs = helper.split_list(args.formats)
    if not specs:
        raise UsageError('compare needs --formats "spec,spec,..."')
    base = build_config(args)
    values = read_tensor(args, base)
    labelled = [(spec, apply_flags(parse_format_spec(spec, block_size=args.block_size), args)) for spec in specs]
    df = analysis.compare_formats(values, labelled, tensor=tensor_label(args))
    emit_frame(df, args.out)
    return EXIT_OK

def run_experiments(config_path, data_dir, only:list=None)->list:
    '''
    Run every experiment of a JSON batch and save one numbered CSV per experiment.

    Each experiment maps parameter names to a value or a list of values; lists are expanded to their
    cartesian product. Keys: sweep (required), format, block_size, synth, n, seed, in, tensor_name.
    '''
    with Path(config_path).open('r') as f:
        try:
            experiments = json.load(f)
        except json.JSONDecodeError as e:
            raise errors.ConfigError(f'{config_path}: {e}')
    paths = []
    for experiment_name, experiment_params in experiments.items():
        if only and experiment_name not in only: continue
        logging.info(f'Starting experiment {experiment_name}')
        start = time.perf_counter()
        params = helper.vals_to_list(experiment_params)
        param_tuples, param_names = helper.params_dict_to_tuples(params)
        swept = [k for k in param_names if len(params[k]) > 1]
        frames = []
        for param_vals in param_tuples:
            p = dict(zip(param_names, param_vals))
            if 'sweep' not in p:
                raise errors.ConfigError(f'Experiment {experiment_name} has no sweep kind')
            cfg = parse_format_spec(p.get('format', 'mxfp4'), block_size=int(p.get('block_size', quant.DEFAULT_BLOCK_SIZE)))
            if 'in' in p:
                path = Path(p['in'])
                kind = {'.npy': 'npy', '.safetensors': 'safetensors'}.get(path.suffix.lower(), 'raw')
                src = ingest.TensorSource(kind, path=str(path), name=p.get('tensor_name'), dtype=p.get('dtype'), shape=p.get('shape'))
            else:
                src = ingest.TensorSource('synthetic', model=p.get('synth', 'gaussian'), n=int(p.get('n', DEFAULT_SYNTH_N)),
                                          seed=p.get('seed'), block_size=cfg.block_size)
            df = analysis.sweep_dispatcher(p['sweep'], ingest.load_tensor(src), cfg, tensor=experiment_name)
            for i, key in enumerate(swept):
                df.insert(i, f'param_{key}', p[key])
            frames.append(df)
        path = save_data.save_report(pd.concat(frames, ignore_index=True), experiment_name, params, data_dir=data_dir)
        logging.info(f'Experiment {experiment_name} done in {time.perf_counter()-start:.2f}s')
        paths.append(path)
    return paths

def add_format_args(p):
    p.add_argument('--format', default='mxfp4', help='format spec, e.g. mxfp4, nxfp4, bfp5, mxfp6-e2m3')
    p.add_argument('--block-size', type=int, default=quant.DEFAULT_BLOCK_SIZE)
    p.add_argument('--no-nano', action='store_true')
    p.add_argument('--no-adaptive', action='store_true')
    p.add_argument('--no-recycle', action='store_true')
    p.add_argument('--recycle-rule', choices=['half-smallest', 'midpoint-top'])
    p.add_argument('--nano-search', choices=list(quant.NANO_SEARCH))

def add_input_args(p):
    p.add_argument('--in', dest='input', help='npy, safetensors or raw binary file')
    p.add_argument('--tensor-name', help='tensor inside a safetensors file')
    p.add_argument('--dtype', choices=sorted(ingest.DTYPES), help='stored dtype (required for raw input)')
    p.add_argument('--shape', help='comma separated shape, e.g. 64,32 (required for raw input)')
    p.add_argument('--synth', choices=['gaussian', 'outliers', 'pairs'], help='synthetic weights instead of --in')
    p.add_argument('--seed', type=int, help='seed for --synth (mandatory)')
    p.add_argument('--n', type=int, help='number of synthetic values')

def build_parser()->ArgumentParser:
    parser = ArgumentParser(prog='nxfp', description='BFP / MxFP / NxFP codec and quantization-error analysis')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('quantize', help='quantize a tensor into a .nxt file')
    add_format_args(p)
    add_input_args(p)
    p.add_argument('--out', help='output .nxt path')

    p = sub.add_parser('dequantize', help='dequantize a .nxt file to npy')
    p.add_argument('--in', dest='input')
    p.add_argument('--out', help='output .npy path')
    p.add_argument('--target', default='binary32', choices=[t.value for t in dequant.DequantTarget])

    p = sub.add_parser('inspect', help='print the header and scale statistics of a .nxt file')
    p.add_argument('--in', dest='input')

    p = sub.add_parser('analyze', help='ablation report, scaled-value histogram and profile CSVs')
    add_format_args(p)
    add_input_args(p)
    p.add_argument('--out', help='output directory')

    p = sub.add_parser('sweep', help='run one sweep, or a JSON batch of experiments')
    add_format_args(p)
    add_input_args(p)
    p.add_argument('--sweep', choices=list(analysis.SWEEPS))
    p.add_argument('--config', help='JSON batch of experiments')
    p.add_argument('--experiments', help='comma separated experiment names to run from --config')
    p.add_argument('--out', help='CSV path (directory with --config); stdout when omitted')

    p = sub.add_parser('compare', help='error of several formats on one tensor')
    add_format_args(p)
    add_input_args(p)
    p.add_argument('--formats', required=True, help='comma separated format specs')
    p.add_argument('--out', help='CSV path; stdout when omitted')
    return parser

COMMANDS = {
    'quantize': cmd_quantize,
    'dequantize': cmd_dequantize,
    'inspect': cmd_inspect,
    'analyze': cmd_analyze,
    'sweep': cmd_sweep,
    'compare': cmd_compare,
}

def main(argv=None)->int:
    '''
    Parse argv, run the command and map errors to exit codes with a one-line diagnostic on stderr
    '''
    parser = build_parser()
    command = None
    try:
        args = parser.parse_args(argv)
        command = args.command
        logging.info(f'Running {command}: {vars(args)}')
        return COMMANDS[command](args)
    except errors.NumericInputError as e:
        status, msg = EXIT_NUMERIC, str(e)
    except (errors.ContainerError, errors.IngestError, OSError) as e:
        status, msg = EXIT_IO, str(e)
    except (UsageError, errors.ConfigError, ValueError) as e:
        status, msg = EXIT_USAGE, str(e)
    prefix = f'nxfp {command}' if command else 'nxfp'
    logging.error(f'{prefix}: {msg}')
    print(f'{prefix}: error: {msg}', file=sys.stderr)
    return status
