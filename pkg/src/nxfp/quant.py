import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import errors
from . import formats as formats

'''
Block quantization: shared exponent, NanoMantissa, MxFP/BFP candidate rounding and the MSE-based
selection of one (NanoMantissa, format) pair per block.

Candidates are visited in the order (0, MxFP), (0, BFP), (m, MxFP), (m, BFP) and a later candidate
replaces the current one only on strictly smaller MSE, so NanoMantissa is kept only when it improves
the error and MxFP wins ties against BFP. All errors are measured in the original value space.
'''

DEFAULT_BLOCK_SIZE = 32
NANO_SEARCH = ('alg1', 'exhaustive')
NANO_SEARCH_ALIASES = {'asalgorithm1': 'alg1', 'candidate': 'alg1', 'exhaustive4': 'exhaustive'}
NANO_FACTORS = np.array([1.0, 1.25, 1.5, 1.75])
E_MIN, E_MAX = -127, 127
ZERO_BLOCK = 128 #reserved e_shared for an all-zero block, stored as byte 0xFF


@dataclass(frozen=True)
class QuantConfig:
    '''
    Block size, element width, microexponent width and the NxFP feature toggles.

    PARAMS
    ------
    block_size (int): elements per block, >= 2
    element_bits (int): B, in [3, 8]
    microexp_bits (int): B_Eu, 0 (BFP) to B-2
    nano_enabled, adaptive_enabled, recycle_enabled (bool): NanoMantissa, Adaptive Microexponent, Code Recycling
    recycle_rule (RecycleRule or str): remap rule of the -0 code
    nano_search (str): 'alg1' tries {candidate, 0} and keeps a candidate only when the decoded block re-derives it,
        'exhaustive' tries all four NanoMantissa values unfiltered. quantize(dequantize(q)) == q holds under 'alg1'
        only; an exhaustive choice can lose its scale on requantization.
    '''
    block_size: int = DEFAULT_BLOCK_SIZE
    element_bits: int = 4
    microexp_bits: int = 2
    nano_enabled: bool = False
    adaptive_enabled: bool = False
    recycle_enabled: bool = False
    recycle_rule: formats.RecycleRule = field(default_factory=formats.RecycleRule)
    nano_search: str = 'alg1'

    def __post_init__(self):
        object.__setattr__(self, 'recycle_rule', formats.recycle_rule(self.recycle_rule))
        search = str(self.nano_search).lower()
        object.__setattr__(self, 'nano_search', NANO_SEARCH_ALIASES.get(search, search))
        for name in ('block_size', 'element_bits', 'microexp_bits'):
            if not isinstance(getattr(self, name), (int, np.integer)) or isinstance(getattr(self, name), bool):
                raise errors.ConfigError(f'{name} must be an integer, got {getattr(self, name)!r}')
            object.__setattr__(self, name, int(getattr(self, name)))
        if self.block_size < 2:
            raise errors.ConfigError(f'block_size must be >= 2, got {self.block_size}')
        if not formats.MIN_BITS <= self.element_bits <= formats.MAX_BITS:
            raise errors.ConfigError(f'element_bits {self.element_bits} outside [{formats.MIN_BITS}, {formats.MAX_BITS}]')
        if not 0 <= self.microexp_bits <= self.element_bits - 2:
            raise errors.ConfigError(f'microexp_bits {self.microexp_bits} must be in [0, {self.element_bits-2}] for {self.element_bits}-bit elements')
        if self.nano_search not in NANO_SEARCH:
            raise errors.ConfigError(f'Unknown nano_search: {self.nano_search}')
        for name in ('nano_enabled', 'adaptive_enabled', 'recycle_enabled'):
            object.__setattr__(self, name, bool(getattr(self, name)))

    @property
    def emax_elem(self)->int:
        '''
        Exponent of the scaled space shared by the MxFP and BFP grids
        '''
        if self.microexp_bits > 0:
            return formats.minifloat_emax(self.microexp_bits)
        return formats.minifloat_emax(formats.reference_exp_bits(self.element_bits))

    @property
    def primary_format(self)->formats.ElementFormat:
        if self.microexp_bits == 0:
            return self.bfp_format
        return formats.ElementFormat(self.microexp_bits, self.element_bits - 1 - self.microexp_bits)

    @property
    def bfp_format(self)->formats.ElementFormat:
        return formats.ElementFormat(0, self.element_bits - 1, ref_emax=self.emax_elem)

    @property
    def primary_fmt_bit(self)->int:
        return 1 if self.microexp_bits > 0 else 0

    def candidate_fmts(self)->list:
        '''
        fmt bits tried per block, in selection order
        '''
        if self.adaptive_enabled and self.microexp_bits > 0:
            return [1, 0]
        return [self.primary_fmt_bit]

    def table(self, fmt_bit:int)->formats.LevelTable:
        fmt = self.primary_format if fmt_bit == 1 else self.bfp_format
        return formats.build_level_table(fmt, self.recycle_enabled, self.recycle_rule)

    @property
    def label(self)->str:
        '''
        Human readable name, e.g. "E2M1+NM+AM+CR" or "BFP4"
        '''
        features = [name for name, on in (('NM', self.nano_enabled), ('AM', self.adaptive_enabled), ('CR', self.recycle_enabled)) if on]
        return '+'.join([self.primary_format.name] + features)

    def replace(self, **changes)->'QuantConfig':
        return dataclasses.replace(self, **changes)


FAMILIES = ('mxfp', 'nxfp', 'bfp')

def default_microexp_bits(element_bits:int)->int:
    '''
    E2 family (E2M1, E2M2, E2M3, ...) for B >= 4, E1M1 for B = 3
    '''
    return formats.reference_exp_bits(element_bits)

def preset_config(family:str, element_bits:int, block_size:int=DEFAULT_BLOCK_SIZE, microexp_bits:Optional[int]=None, **overrides)->QuantConfig:
    '''
    QuantConfig of a named format family.

    PARAMS
    ------
    family (str): 'mxfp' (plain microscaling), 'nxfp' (NanoMantissa + Adaptive Microexponent + Code Recycling)
        or 'bfp' (microexp_bits = 0)
    element_bits (int): B
    **block_size (int)
    **microexp_bits (int): overrides the family default; at 0 an nxfp preset has no second format, so Adaptive is off
    **overrides: any other QuantConfig field
    '''
    family = family.lower()
    if family not in FAMILIES:
        raise errors.ConfigError(f'Unknown format family: {family}')
    if family == 'bfp':
        if microexp_bits not in (None, 0):
            raise errors.ConfigError('BFP elements have no microexponent')
        microexp_bits = 0
    elif microexp_bits is None:
        microexp_bits = default_microexp_bits(element_bits)
    nx = family == 'nxfp'
    params = dict(block_size=block_size, element_bits=element_bits, microexp_bits=microexp_bits,
                  nano_enabled=nx, adaptive_enabled=nx and microexp_bits > 0, recycle_enabled=nx)
    params.update(overrides)
    return QuantConfig(**params)


@dataclass(frozen=True)
class BlockScale:
    e_shared: int
    m_nano: int = 0
    fmt: int = 1

    @property
    def is_zero(self)->bool:
        return self.e_shared == ZERO_BLOCK

    @property
    def nano_factor(self)->float:
        return 1 + self.m_nano / 4


@dataclass(frozen=True)
class BlockReport:
    mse: float
    l1_max: float


@dataclass(frozen=True, eq=False)
class QuantizedBlock:
    scale: BlockScale
    codes: np.ndarray
    report: BlockReport


@dataclass(frozen=True, eq=False)
class BlockBatch:
    '''
    Per-block results of quantize_blocks as parallel arrays
    '''
    e_shared: np.ndarray #int16, ZERO_BLOCK for all-zero blocks
    m_nano: np.ndarray #uint8
    fmt: np.ndarray #uint8
    codes: np.ndarray #uint8, (n_blocks, block_size)
    mse: np.ndarray
    l1_max: np.ndarray


def floor_log2(x)->np.ndarray:
    '''
    Exact floor(log2(x)) for positive finite x, via the binary exponent
    '''
    return np.frexp(np.asarray(x, dtype=np.float64))[1] - 1

def shared_exponents(absmax)->np.ndarray:
    '''
    Vectorized shared exponent: floor(log2(max|v|)) per block, clamped below at E_MIN,
    ZERO_BLOCK where the block maximum is 0. Raises NumericInputError above E_MAX.
    '''
    absmax = np.asarray(absmax, dtype=np.float64)
    e = np.maximum(floor_log2(absmax), E_MIN)
    over = (absmax > 0) & (e > E_MAX)
    if over.any():
        k = int(np.argmax(over.ravel()))
        raise errors.NumericInputError(f'magnitude {absmax.ravel()[k]} exceeds the shared exponent range', block=k)
    return np.where(absmax == 0, ZERO_BLOCK, e).astype(np.int16)

def shared_exponent(block)->int:
    '''
    floor(log2(max_i |v_i|)) of a block; ZERO_BLOCK for an all-zero block

    PARAMS
    ------
    block: 1D array of finite reals, non-empty
    '''
    block = np.asarray(block, dtype=np.float64)
    if block.size == 0:
        raise errors.NumericInputError('zero-length block')
    if not np.isfinite(block).all():
        raise errors.NumericInputError('NaN/Inf in block')
    return int(shared_exponents(np.max(np.abs(block)))[()])

def nano_candidates(scaled_max, qmax:float)->np.ndarray:
    '''
    2-bit NanoMantissa whose factor 1 + m/4 is nearest to scaled_max / qmax, clamped to [0, 3]
    '''
    ratio = np.asarray(scaled_max, dtype=np.float64) / qmax
    return np.clip(np.rint((ratio - 1) * 4), 0, 3).astype(np.uint8)

def nano_candidate(block, e_shared:int, fmt_qmax:float, emax_elem:int=2)->int:
    '''
    NanoMantissa candidate of a block.

    PARAMS
    ------
    block: 1D array, not all zero
    e_shared (int): block shared exponent
    fmt_qmax (float): largest element level
    **emax_elem (int): exponent of the scaled space (2 for the E2 family)

    NOTES
    -----
    Uses the ratio of the scaled block maximum to the largest level. For the -7.4 block under E2M1 this
    gives 1.25, the factor that reconstructs -7.4 as -7.5.
    '''
    block = np.asarray(block, dtype=np.float64)
    if not np.any(block):
        raise errors.NumericInputError('NanoMantissa of an all-zero block is undefined')
    scaled_max = np.ldexp(np.max(np.abs(block)), np.int32(emax_elem - e_shared))
    return int(nano_candidates(scaled_max, fmt_qmax)[()])

def block_mse(rows, recon, n_valid)->tuple:
    '''
    Per-block mean squared error and max abs error over the valid lanes. Shared by the quantizer and the analysis
    module so both see bit-identical numbers.
    '''
    rows = np.asarray(rows, dtype=np.float64)
    n_valid = np.asarray(n_valid)
    valid = np.arange(rows.shape[1])[None, :] < n_valid[:, None]
    err = np.where(valid, rows - recon, 0.0)
    return np.sum(err*err, axis=1) / n_valid, np.max(np.abs(err), axis=1)

def reconstruct(codes, e_shared, m_nano, fmt, cfg:QuantConfig)->np.ndarray:
    '''
    Exact float64 values of blocks of codes: level * (1 + m/4) * 2^(e_shared - emax_elem), zero blocks -> 0
    '''
    codes = np.asarray(codes)
    e_shared = np.asarray(e_shared, dtype=np.int64)
    zero = e_shared == ZERO_BLOCK
    fmt = np.asarray(fmt)[:, None]
    levels = np.where(fmt == 1, cfg.table(1).lut[codes], cfg.table(0).lut[codes])
    nano = NANO_FACTORS[np.asarray(m_nano, dtype=np.intp)][:, None]
    shift = np.where(zero, 0, e_shared - cfg.emax_elem).astype(np.int32)[:, None]
    return np.where(zero[:, None], 0.0, np.ldexp(levels * nano, shift))

def _nano_slots(cfg:QuantConfig, m_c:np.ndarray)->list:
    if not cfg.nano_enabled:
        return [np.zeros_like(m_c)]
    if cfg.nano_search == 'alg1':
        return [np.zeros_like(m_c), m_c]
    return [np.full_like(m_c, m) for m in range(len(NANO_FACTORS))]

def quantize_blocks(rows, cfg:QuantConfig, n_valid=None)->BlockBatch:
    '''
    Quantize a batch of blocks independently.

    PARAMS
    ------
    rows: 2D array (n_blocks, block_size) of finite values; padded lanes must be zero
    cfg (QuantConfig)
    **n_valid: 1D array of valid lanes per block (padded lanes excluded from the MSE), full blocks if None

    RETURNS
    -------
    BlockBatch with shared exponents, NanoMantissas, fmt bits, codes, and per-block MSE / max abs error

    NOTES
    -----
    Under 'alg1' search a NanoMantissa candidate is only admissible when its reconstruction has the same shared
    exponent and the same NanoMantissa candidate as the input block. This keeps the stored scale
    re-derivable from decoded values, so quantize(dequantize(q)) == q. 'exhaustive' is unfiltered.
    '''
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[1] != cfg.block_size:
        raise ValueError(f'Expected blocks of shape (n, {cfg.block_size}), got {rows.shape}')
    n_blocks, bs = rows.shape
    if n_blocks == 0:
        raise errors.NumericInputError('zero-length input')
    n_valid = np.full(n_blocks, bs) if n_valid is None else np.asarray(n_valid)
    if np.any(n_valid < 1) or np.any(n_valid > bs):
        raise ValueError(f'n_valid must be in [1, {bs}]')
    finite = np.isfinite(rows).all(axis=1)
    if not finite.all():
        raise errors.NumericInputError('NaN/Inf in block', block=int(np.argmin(finite)))

    absmax = np.max(np.abs(rows), axis=1)
    e_shared = shared_exponents(absmax)
    zero = e_shared == ZERO_BLOCK
    shift = np.where(zero, 0, e_shared.astype(np.int32) - cfg.emax_elem).astype(np.int32)
    u = np.ldexp(rows, -shift[:, None])
    qmax = cfg.table(cfg.primary_fmt_bit).max_level
    m_c = nano_candidates(np.ldexp(absmax, -shift), qmax)
    check_scale = cfg.nano_enabled and cfg.nano_search == 'alg1'

    cache = {}
    def evaluate(m:int, f:int):
        if (m, f) not in cache:
            table = cfg.table(f)
            codes = formats.encode_array(u, table, scale=NANO_FACTORS[m])
            recon = np.ldexp(table.lut[codes] * NANO_FACTORS[m], shift[:, None])
            mse, l1 = block_mse(rows, recon, n_valid)
            ok = np.ones(n_blocks, dtype=bool)
            if check_scale and m != 0:
                r_max = np.max(np.abs(recon), axis=1)
                r_e = np.where(r_max > 0, np.maximum(floor_log2(np.where(r_max > 0, r_max, 1.0)), E_MIN), ZERO_BLOCK)
                ok = (r_e == e_shared) & (nano_candidates(np.ldexp(r_max, -shift), qmax) == m)
            cache[(m, f)] = (codes, mse, l1, ok)
        return cache[(m, f)]

    best_mse = np.full(n_blocks, np.inf)
    best_l1 = np.zeros(n_blocks)
    best_m = np.zeros(n_blocks, dtype=np.uint8)
    best_f = np.full(n_blocks, cfg.primary_fmt_bit, dtype=np.uint8)
    best_codes = np.zeros((n_blocks, bs), dtype=np.uint8)
    for slot in _nano_slots(cfg, m_c):
        for f in cfg.candidate_fmts():
            for m in np.unique(slot):
                sel = slot == m
                codes, mse, l1, ok = evaluate(int(m), f)
                better = sel & ok & (mse < best_mse)
                best_mse = np.where(better, mse, best_mse)
                best_l1 = np.where(better, l1, best_l1)
                best_m = np.where(better, m, best_m).astype(np.uint8)
                best_f = np.where(better, f, best_f).astype(np.uint8)
                best_codes[better] = codes[better]

    #blocks that round to all +0 are stored as the reserved zero block
    zero = zero | ~best_codes.any(axis=1)
    e_shared = np.where(zero, ZERO_BLOCK, e_shared).astype(np.int16)
    best_m[zero] = 0
    best_f[zero] = cfg.primary_fmt_bit
    logging.debug(f'Quantized {n_blocks} blocks with {cfg.label}: {int(zero.sum())} zero blocks, {int(np.sum(best_f == 0))} BFP blocks')
    return BlockBatch(e_shared, best_m, best_f, best_codes, best_mse, best_l1)

def quantize_block(block, cfg:QuantConfig, n_valid:Optional[int]=None)->QuantizedBlock:
    '''
    Quantize one block with the candidate order described in the module notes.

    PARAMS
    ------
    block: 1D array of finite values; shorter than block_size is zero-padded here
    cfg (QuantConfig)
    **n_valid (int): logical length when the caller already padded the block

    RETURNS
    -------
    QuantizedBlock(scale, codes, report)
    '''
    block = np.asarray(block, dtype=np.float64).ravel()
    if block.size == 0:
        raise errors.NumericInputError('zero-length block')
    if block.size > cfg.block_size:
        raise ValueError(f'Block of {block.size} values exceeds block_size {cfg.block_size}')
    if n_valid is None:
        n_valid = block.size
    row = np.zeros((1, cfg.block_size))
    row[0, :block.size] = block
    batch = quantize_blocks(row, cfg, n_valid=[n_valid])
    scale = BlockScale(int(batch.e_shared[0]), int(batch.m_nano[0]), int(batch.fmt[0]))
    return QuantizedBlock(scale, batch.codes[0], BlockReport(float(batch.mse[0]), float(batch.l1_max[0])))

def to_blocks(values, block_size:int):
    '''
    Flatten values and cut them into zero-padded blocks

    RETURNS
    -------
    rows (np.ndarray): (n_blocks, block_size) float64
    n_valid (np.ndarray): logical lanes per block
    '''
    flat = np.asarray(values, dtype=np.float64).ravel()
    if flat.size == 0:
        raise errors.NumericInputError('zero-length tensor')
    n_blocks = math.ceil(flat.size / block_size)
    padded = np.zeros(n_blocks * block_size)
    padded[:flat.size] = flat
    n_valid = np.full(n_blocks, block_size)
    n_valid[-1] = flat.size - (n_blocks-1) * block_size
    return padded.reshape(n_blocks, block_size), n_valid

def quantize_tensor(values, cfg:QuantConfig):
    '''
    Quantize a tensor into a PackedTensor. The flattened tensor is cut into block_size blocks
    (final block zero-padded) and each block is quantized independently, so the output does not
    depend on evaluation order.
    '''
    from . import container
    values = np.asarray(values)
    shape = values.shape if values.ndim > 0 else (1,)
    rows, n_valid = to_blocks(values, cfg.block_size)
    batch = quantize_blocks(rows, cfg, n_valid)
    return container.PackedTensor(shape=tuple(int(d) for d in shape), cfg=cfg, e_shared=batch.e_shared,
                                  m_nano=batch.m_nano, fmt=batch.fmt, codes=batch.codes)
