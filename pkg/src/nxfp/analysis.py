import logging
import time
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy import stats

from . import container as container
from . import errors
from . import formats as formats
from . import helper as helper
from . import parallel as parallel
from . import quant as quant

'''
Quantization-error metrics, the scaled-value profile, and the sweeps (ablation, recycled value,
block size, microexponent width). Every aggregate is an exact (fsum) sum so reports do not depend on
block grouping or worker count.
'''

BLOCK_SIZES = (8, 16, 32, 64, 128)
HIST_BINS = 64
FAMILY_NAMES = {'mxfp': 'MxFP', 'bfp': 'BFP', 'nxfp': 'NxFP'}
REPORT_COLUMNS = ['tensor', 'format', 'block_size', 'blocks', 'bits_per_element', 'mse', 'l1', 'max_abs', 'bfp_fraction']


def four_moments(array)->list:
    '''
    mean, variance, skew and kurtosis of a 1D array
    '''
    array = np.asarray(array, dtype=np.float64).ravel()
    mean = helper.exact_mean(array)
    variance = helper.exact_mean((array - mean)**2)
    skew = float(stats.skew(array)) if variance > 0 else 0.0
    kurtosis = float(stats.kurtosis(array)) if variance > 0 else 0.0
    return [mean, variance, skew, kurtosis]

def block_errors(values, packed)->pd.DataFrame:
    '''
    Per-block errors recomputed from a PackedTensor and the original values

    RETURNS
    -------
    DataFrame with columns block, n_valid, e_shared, m_nano, fmt, mse, l1, max_abs
    '''
    rows, n_valid = quant.to_blocks(values, packed.cfg.block_size)
    if rows.shape[0] != packed.n_blocks:
        raise ValueError(f'{rows.shape[0]} blocks of values for a tensor of {packed.n_blocks} blocks')
    recon = quant.reconstruct(packed.codes, packed.e_shared, packed.m_nano, packed.fmt, packed.cfg)
    mse, max_abs = quant.block_mse(rows, recon, n_valid)
    valid = np.arange(rows.shape[1])[None, :] < n_valid[:, None]
    l1 = np.sum(np.where(valid, np.abs(rows - recon), 0.0), axis=1) / n_valid
    return pd.DataFrame({
        'block': np.arange(packed.n_blocks), 'n_valid': n_valid, 'e_shared': packed.e_shared,
        'm_nano': packed.m_nano, 'fmt': packed.fmt, 'mse': mse, 'l1': l1, 'max_abs': max_abs,
    })

def error_report(values, packed, tensor:str='tensor', label:str=None)->dict:
    '''
    Aggregate error of one quantized tensor.

    RETURNS
    -------
    dict with REPORT_COLUMNS; mse and l1 are element-weighted means of the per-block values
    '''
    df = block_errors(values, packed)
    nonzero = df['e_shared'] != quant.ZERO_BLOCK
    return {
        'tensor': tensor,
        'format': label or packed.cfg.label,
        'block_size': packed.cfg.block_size,
        'blocks': packed.n_blocks,
        'bits_per_element': float(container.footprint_bits_per_element(packed.cfg)),
        'mse': helper.weighted_mean(df['mse'], df['n_valid']),
        'l1': helper.weighted_mean(df['l1'], df['n_valid']),
        'max_abs': float(df['max_abs'].max()),
        'bfp_fraction': helper.exact_mean((df['fmt'] == 0)[nonzero]) if nonzero.any() else 0.0,
    }

def quantize_and_report(values, cfg:quant.QuantConfig, tensor:str='tensor', label:str=None)->dict:
    '''
    Module-level worker: quantize values with cfg and return its error_report row
    '''
    packed = quant.quantize_tensor(values, cfg)
    return error_report(values, packed, tensor=tensor, label=label)

def _run_configs(values, labelled_cfgs:list, tensor:str='tensor', workers:int=None)->list:
    tasks = [(values, cfg, tensor, label) for label, cfg in labelled_cfgs]
    return parallel.run_parallel(quantize_and_report, tasks, workers=workers)


@dataclass(frozen=True, eq=False)
class ScaledHistogram:
    '''
    Histogram of values divided by their block scale 2^(E_shared - emax).

    edges, counts: np.histogram over value_range with HIST_BINS bins
    levels: signed levels of the primary element format (where the grid can land)
    outlier_gap_fraction: share of elements with scaled magnitude above the largest level
    vacant_gap_fraction: share of elements strictly between the two largest levels
    moments: mean, variance, skew, kurtosis of the scaled values
    '''
    edges: np.ndarray
    counts: np.ndarray
    levels: np.ndarray
    outlier_gap_fraction: float
    vacant_gap_fraction: float
    moments: list
    n_elements: int

    def to_frame(self)->pd.DataFrame:
        return pd.DataFrame({'bin_left': self.edges[:-1], 'bin_right': self.edges[1:], 'count': self.counts})

    def summary(self)->dict:
        mean, variance, skew, kurtosis = self.moments
        return {'elements': self.n_elements, 'outlier_gap_fraction': self.outlier_gap_fraction,
                'vacant_gap_fraction': self.vacant_gap_fraction, 'mean': mean, 'variance': variance,
                'skew': skew, 'kurtosis': kurtosis}


def scaled_values(values, cfg:quant.QuantConfig)->np.ndarray:
    '''
    Values divided by 2^(E_shared - emax_elem) per block (padding dropped; zero blocks stay 0)
    '''
    rows, n_valid = quant.to_blocks(values, cfg.block_size)
    e_shared = quant.shared_exponents(np.max(np.abs(rows), axis=1))
    shift = np.where(e_shared == quant.ZERO_BLOCK, 0, e_shared.astype(np.int32) - cfg.emax_elem).astype(np.int32)
    scaled = np.ldexp(rows, -shift[:, None])
    return scaled.ravel()[:int(n_valid.sum())]

def profile_scaled_distribution(values, cfg:quant.QuantConfig, bins:int=HIST_BINS, value_range=None)->ScaledHistogram:
    '''
    Profile the values in the scaled space of cfg's primary format.

    PARAMS
    ------
    values: finite tensor
    cfg (QuantConfig)
    **bins (int)
    **value_range (tuple): histogram range, +-2^(emax_elem+1) by default ([-8, 8] for E2 formats);
        values outside are counted in the edge bins

    NOTES
    -----
    The outlier gap is (largest level, 2^(emax+1)): magnitudes the format can only clamp. The vacant gap is the
    open interval between the two largest levels (4 and 6 for E2M1).
    '''
    values = np.asarray(values, dtype=np.float64)
    if not np.isfinite(values).all():
        raise errors.NumericInputError('NaN/Inf in tensor')
    u = scaled_values(values, cfg)
    top = float(2**(cfg.emax_elem + 1))
    lo, hi = value_range if value_range is not None else (-top, top)
    counts, edges = np.histogram(np.clip(u, lo, hi), bins=bins, range=(lo, hi))
    levels = cfg.table(cfg.primary_fmt_bit).levels
    mags = np.abs(u)
    outlier = helper.exact_mean((mags > levels[-1]) & (mags < top))
    vacant = helper.exact_mean((mags > levels[-2]) & (mags < levels[-1]))
    signed_levels = np.concatenate([-levels[:0:-1], levels])
    logging.info(f'Profiled {u.size} values under {cfg.primary_format.name}: outlier gap {outlier:.4f}, vacant gap {vacant:.4f}')
    return ScaledHistogram(edges, counts, signed_levels, outlier, vacant, four_moments(u), int(u.size))

def ablation_configs(element_bits:int=4, block_size:int=quant.DEFAULT_BLOCK_SIZE, microexp_bits:int=None)->dict:
    '''
    Feature sets added cumulatively on top of MxFP, plus plain BFP. microexp_bits defaults to the E2 family.
    '''
    mx = quant.preset_config('mxfp', element_bits, block_size, microexp_bits=microexp_bits)
    return {
        'MxFP': mx,
        'MxFP+NM': mx.replace(nano_enabled=True),
        'MxFP+NM+AM': mx.replace(nano_enabled=True, adaptive_enabled=True),
        'NxFP': quant.preset_config('nxfp', element_bits, block_size, microexp_bits=microexp_bits),
        'BFP': quant.preset_config('bfp', element_bits, block_size),
    }

def ablation_sweep(values, element_bits:int=4, block_size:int=quant.DEFAULT_BLOCK_SIZE, microexp_bits:int=None, tensor:str='tensor', workers:int=None)->pd.DataFrame:
    '''
    Error of every ablation feature set and its relative MSE reduction against MxFP.

    RETURNS
    -------
    DataFrame: feature_set + REPORT_COLUMNS[1:] + reduction_vs_mxfp (1 - mse / mse_MxFP, 0 when MxFP is exact)
    '''
    start = time.perf_counter()
    cfgs = ablation_configs(element_bits, block_size, microexp_bits)
    rows = _run_configs(values, list(cfgs.items()), tensor=tensor, workers=workers)
    df = pd.DataFrame(rows, columns=REPORT_COLUMNS)
    df.insert(0, 'feature_set', list(cfgs))
    df['format'] = [cfg.label for cfg in cfgs.values()]
    base = df.loc[df['feature_set'] == 'MxFP', 'mse'].iloc[0]
    df['reduction_vs_mxfp'] = 1 - df['mse'] / base if base > 0 else 0.0
    logging.info(f'Ablation sweep B={element_bits} BS={block_size} took {time.perf_counter()-start:.2f}s')
    return df

def default_recycle_candidates(cfg:quant.QuantConfig)->list:
    '''
    Negative midpoints between adjacent levels of the primary format, the first being half the smallest level.
    Returned as rules: 'half-smallest' for that one, explicit values for the rest.
    '''
    levels = cfg.table(cfg.primary_fmt_bit).levels
    rules = [formats.RecycleRule()]
    seen = {-levels[1] / 2}
    for lo, hi in zip(levels[:-1], levels[1:]):
        v = -(lo + hi) / 2
        if v not in seen:
            seen.add(v)
            rules.append(formats.RecycleRule('value', v))
    return rules

def recycled_value_sweep(values, cfg:quant.QuantConfig, candidates:list=None, tensor:str='tensor', workers:int=None)->pd.DataFrame:
    '''
    MSE for each remap rule of the -0 code.

    PARAMS
    ------
    values: tensor
    cfg (QuantConfig): recycle_enabled must be set; only recycle_rule is varied
    **candidates (list): RecycleRule or rule strings, default_recycle_candidates(cfg) when None

    RETURNS
    -------
    DataFrame sorted by MSE (stable in candidate order): rule, recycled_value, mse, baseline_mse, reduction
    where the baseline is the same cfg without recycling
    '''
    if not cfg.recycle_enabled:
        raise errors.ConfigError('Recycled-value sweep needs a configuration with Code Recycling enabled')
    if candidates is None:
        candidates = default_recycle_candidates(cfg)
    candidates = [formats.recycle_rule(c) for c in candidates]
    if not candidates:
        raise errors.ConfigError('Recycled-value sweep needs at least one candidate')
    labelled = [('baseline', cfg.replace(recycle_enabled=False))] + [(str(r), cfg.replace(recycle_rule=r)) for r in candidates]
    reports = _run_configs(values, labelled, tensor=tensor, workers=workers)
    baseline = reports[0]['mse']
    levels = cfg.table(cfg.primary_fmt_bit).levels
    df = pd.DataFrame({
        'rule': [str(r) for r in candidates],
        'recycled_value': [r.resolve(levels) for r in candidates],
        'mse': [rep['mse'] for rep in reports[1:]],
    })
    df['baseline_mse'] = baseline
    df['reduction'] = 1 - df['mse'] / baseline if baseline > 0 else 0.0
    return df.sort_values('mse', kind='mergesort').reset_index(drop=True)

def block_size_sweep(values, element_bits:int=4, sizes=BLOCK_SIZES, microexp_bits:int=None, workers:int=None)->pd.DataFrame:
    '''
    MxFP / BFP / NxFP error and footprint at each block size, long format:
    block_size, format, bits_per_element, mse. microexp_bits sets the MxFP and NxFP element format.
    '''
    sizes = list(sizes)
    if not sizes:
        raise errors.ConfigError('Block-size sweep needs at least one size')
    labelled = []
    for bs in sizes:
        for family in ('mxfp', 'bfp', 'nxfp'):
            cfg = quant.preset_config(family, element_bits, int(bs), microexp_bits=None if family == 'bfp' else microexp_bits)
            labelled.append((f'{FAMILY_NAMES[family]}{element_bits}', cfg))
    reports = _run_configs(values, labelled, workers=workers)
    return pd.DataFrame([{k: rep[k] for k in ('block_size', 'format', 'bits_per_element', 'mse')} for rep in reports])

def microexp_config_sweep(values, element_bits:int=4, block_size:int=quant.DEFAULT_BLOCK_SIZE, workers:int=None)->pd.DataFrame:
    '''
    MSE of every microexponent width 0 (BFP) to B-2 at one element width; best marks the minimal MSE row
    '''
    if not formats.MIN_BITS <= element_bits <= formats.MAX_BITS:
        raise errors.ConfigError(f'element_bits {element_bits} outside [{formats.MIN_BITS}, {formats.MAX_BITS}]')
    labelled = [(None, quant.QuantConfig(block_size=block_size, element_bits=element_bits, microexp_bits=e))
                for e in range(element_bits - 1)]
    reports = _run_configs(values, labelled, workers=workers)
    df = pd.DataFrame({
        'microexp_bits': list(range(element_bits - 1)),
        'format': [rep['format'] for rep in reports],
        'mse': [rep['mse'] for rep in reports],
    })
    df['best'] = df['mse'] == df['mse'].min()
    return df

def compare_formats(values, labelled_cfgs:list, tensor:str='tensor', workers:int=None)->pd.DataFrame:
    '''
    One error_report row per (label, QuantConfig) pair, in the given order
    '''
    if not labelled_cfgs:
        raise errors.ConfigError('Nothing to compare')
    return pd.DataFrame(_run_configs(values, labelled_cfgs, tensor=tensor, workers=workers), columns=REPORT_COLUMNS)

SWEEPS = ('ablation', 'block-size', 'recycled-value', 'microexp')

def sweep_dispatcher(sweep:str, values, cfg:quant.QuantConfig, tensor:str='tensor', workers:int=None)->pd.DataFrame:
    '''
    Run one named sweep with the element width and block size of cfg.
    The recycled-value sweep turns Code Recycling on when cfg has it off. Ablation and block-size sweeps keep the
    microexponent width of cfg, or the E2 family for a BFP cfg.
    '''
    microexp = cfg.microexp_bits or None
    if sweep == 'ablation':
        return ablation_sweep(values, cfg.element_bits, cfg.block_size, microexp_bits=microexp, tensor=tensor, workers=workers)
    elif sweep == 'block-size':
        return block_size_sweep(values, cfg.element_bits, microexp_bits=microexp, workers=workers)
    elif sweep == 'recycled-value':
        return recycled_value_sweep(values, cfg.replace(recycle_enabled=True), tensor=tensor, workers=workers)
    elif sweep == 'microexp':
        return microexp_config_sweep(values, cfg.element_bits, cfg.block_size, workers=workers)
    raise errors.ConfigError(f'Unable to dispatch sweep: {sweep}')
