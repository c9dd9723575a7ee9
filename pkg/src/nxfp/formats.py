import functools
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import errors

'''
Element formats and their quantization-level tables.

All tables live in one "scaled space": a block is divided by 2^(E_shared - emax) so its largest
magnitude lands in [2^emax, 2^(emax+1)). Minifloat (MxFP) elements use the usual
sign/exponent/mantissa semantics with subnormals and no Inf/NaN codes; BFP elements (exp_bits = 0)
are sign-magnitude integers on a uniform grid spanning the same [0, 2^(emax+1)) range.
An element code is sign << (B-1) | magnitude code, and magnitude codes index the sorted levels.
'''

MIN_BITS, MAX_BITS = 3, 8
RECYCLE_KINDS = ('half-smallest', 'midpoint-top', 'value')


def minifloat_bias(exp_bits:int)->int:
    if exp_bits >= 2:
        return 2**(exp_bits-1) - 1
    return 0

def minifloat_emax(exp_bits:int)->int:
    '''
    Exponent of the largest normal level of a minifloat with exp_bits >= 1
    '''
    return (2**exp_bits - 1) - minifloat_bias(exp_bits)

def reference_exp_bits(total_bits:int)->int:
    '''
    Microexponent width whose scaled space a BFP format of total_bits shares when no MxFP format is configured.
    E2 family for B >= 4, E1M1 for B = 3.
    '''
    return min(2, total_bits-2)


@dataclass(frozen=True)
class ElementFormat:
    '''
    Sign/exponent/mantissa element descriptor.

    PARAMS
    ------
    exp_bits (int): microexponent width, 0 means BFP (all mantissa)
    mant_bits (int): trailing mantissa bits
    **ref_emax (int): BFP only, exponent of the scaled space the uniform grid spans; derived from
        reference_exp_bits when omitted. Ignored for minifloats.
    '''
    exp_bits: int
    mant_bits: int
    ref_emax: Optional[int] = None

    def __post_init__(self):
        if self.exp_bits < 0 or self.mant_bits < 0:
            raise errors.ConfigError(f'Field widths must be non-negative: E{self.exp_bits}M{self.mant_bits}')
        if not MIN_BITS <= self.total_bits <= MAX_BITS:
            raise errors.ConfigError(f'Element width {self.total_bits} outside [{MIN_BITS}, {MAX_BITS}]')
        if self.exp_bits == 0 and self.ref_emax is None:
            object.__setattr__(self, 'ref_emax', minifloat_emax(reference_exp_bits(self.total_bits)))
        elif self.exp_bits > 0:
            object.__setattr__(self, 'ref_emax', None)

    @property
    def total_bits(self)->int:
        return 1 + self.exp_bits + self.mant_bits

    @property
    def bias(self)->int:
        return minifloat_bias(self.exp_bits)

    @property
    def is_bfp(self)->bool:
        return self.exp_bits == 0

    @property
    def emax(self)->int:
        if self.is_bfp:
            return self.ref_emax
        return minifloat_emax(self.exp_bits)

    @property
    def n_magnitudes(self)->int:
        return 2**(self.exp_bits + self.mant_bits)

    @property
    def name(self)->str:
        if self.is_bfp:
            return f'BFP{self.total_bits}'
        return f'E{self.exp_bits}M{self.mant_bits}'

    def magnitudes(self)->np.ndarray:
        '''
        Non-negative levels indexed by magnitude code, strictly increasing, exact dyadic float64 values
        '''
        m = self.mant_bits
        if self.is_bfp:
            return np.ldexp(np.arange(2**m, dtype=np.float64), self.emax + 1 - m)
        codes = np.arange(self.n_magnitudes)
        e_field, mant = codes >> m, codes & (2**m - 1)
        subnormal = np.ldexp(mant.astype(np.float64), 1 - self.bias - m)
        normal = np.ldexp((2**m + mant).astype(np.float64), e_field - self.bias - m)
        return np.where(e_field == 0, subnormal, normal)

    @property
    def max_level(self)->float:
        return float(self.magnitudes()[-1])


@dataclass(frozen=True)
class RecycleRule:
    '''
    Which value the otherwise wasted -0 code (sign 1, magnitude 0) decodes to.

    half-smallest: half the smallest nonzero level (right shift of the smallest level)
    midpoint-top: midpoint between the two largest levels
    value: an explicit signed value in the scaled space
    negative applies to the two named kinds, since the code keeps its sign bit.
    '''
    kind: str = 'half-smallest'
    value: Optional[float] = None
    negative: bool = True

    def __post_init__(self):
        if self.kind not in RECYCLE_KINDS:
            raise errors.ConfigError(f'Unknown recycle rule: {self.kind}')
        if self.kind == 'value':
            if self.value is None or not np.isfinite(self.value):
                raise errors.ConfigError(f'Recycle rule "value" needs a finite value, got {self.value}')
            object.__setattr__(self, 'value', float(self.value))
        elif self.value is not None:
            raise errors.ConfigError(f'Recycle rule {self.kind} takes no value')

    def resolve(self, magnitudes:np.ndarray)->float:
        if self.kind == 'value':
            return self.value
        if self.kind == 'half-smallest':
            mag = magnitudes[1] / 2
        else:
            mag = (magnitudes[-1] + magnitudes[-2]) / 2
        return float(-mag if self.negative else mag)

    def __str__(self):
        if self.kind == 'value':
            return f'value:{self.value!r}'
        return ('' if self.negative else '+') + self.kind


def recycle_rule(spec)->RecycleRule:
    '''
    Parse a rule string: "half-smallest", "+half-smallest", "midpoint-top", "+midpoint-top" or "value:<float>".
    RecycleRule instances pass through.
    '''
    if isinstance(spec, RecycleRule):
        return spec
    if not isinstance(spec, str):
        raise errors.ConfigError(f'Recycle rule must be a string, cannot be: {spec}')
    s = spec.strip().lower().replace('_', '-')
    if s.startswith('value:'):
        try:
            return RecycleRule('value', float(s.partition(':')[2]))
        except ValueError:
            raise errors.ConfigError(f'Unable to parse recycle value: {spec}')
    negative = not s.startswith('+')
    s = s.lstrip('+')
    if s in ('half-smallest', 'midpoint-top'):
        return RecycleRule(s, negative=negative)
    raise errors.ConfigError(f'Unable to dispatch recycle rule: {spec}')


@dataclass(frozen=True, eq=False)
class LevelTable:
    '''
    Materialized signed level set of an ElementFormat.

    levels: magnitudes by magnitude code
    lut: signed value by element code (2^B entries); the -0 code holds recycled_value when set
    enc_values/enc_codes/enc_rank: sorted distinct values the encoder can emit, their codes, and the
        tie-break rank (even magnitude code first, recycled code last)
    '''
    fmt: ElementFormat
    levels: np.ndarray
    recycled_value: Optional[float]
    lut: np.ndarray
    enc_values: np.ndarray
    enc_codes: np.ndarray
    enc_rank: np.ndarray

    @property
    def sign_bit(self)->int:
        return 1 << (self.fmt.total_bits - 1)

    @property
    def max_level(self)->float:
        return float(self.levels[-1])

    @property
    def smallest_level(self)->float:
        return float(self.levels[1])

    def level_of_code(self, code:int)->float:
        return decode_scalar(code, self)

    def code_of_level(self, value:float)->int:
        '''
        Element code the encoder emits for an exact level value; raises ValueError for non-levels
        '''
        i = np.searchsorted(self.enc_values, value)
        if i >= len(self.enc_values) or self.enc_values[i] != value:
            raise ValueError(f'{value} is not a level of {self.fmt.name}')
        return int(self.enc_codes[i])


@functools.lru_cache(maxsize=None)
def build_level_table(fmt:ElementFormat, recycle:bool=False, recycled_rule:RecycleRule=RecycleRule())->LevelTable:
    '''
    Build the complete signed level table of fmt.

    PARAMS
    ------
    fmt (ElementFormat): element descriptor, total_bits in [3, 8]
    **recycle (bool): bind the -0 code to the value given by recycled_rule
    **recycled_rule (RecycleRule): remap rule, half the smallest level by default

    RETURNS
    -------
    LevelTable, cached per (fmt, recycle, rule) since tables are immutable

    NOTES
    -----
    Codes that decode to the same value are deduplicated for encoding, keeping the lowest tie-break rank,
    so a recycled value equal to an existing level never changes what the encoder emits.
    '''
    if not MIN_BITS <= fmt.total_bits <= MAX_BITS:
        raise errors.ConfigError(f'Element width {fmt.total_bits} outside [{MIN_BITS}, {MAX_BITS}]')
    levels = fmt.magnitudes()
    levels.setflags(write=False)
    n_mag = fmt.n_magnitudes
    sign_bit = n_mag

    lut = np.concatenate([levels, -levels])
    recycled_value = None
    if recycle:
        recycled_value = recycled_rule.resolve(levels)
        lut[sign_bit] = recycled_value
        logging.debug(f'{fmt.name}: -0 code recycled to {recycled_value}')
    lut.setflags(write=False)

    codes = np.arange(2*n_mag)
    keep = codes != sign_bit if not recycle else np.ones(2*n_mag, dtype=bool)
    codes = codes[keep]
    values = lut[codes]
    rank = ((codes & (n_mag-1)) % 2) + 2*(codes == sign_bit)
    order = np.lexsort((rank, values))
    values, codes, rank = values[order], codes[order], rank[order]
    _, first = np.unique(values, return_index=True)
    enc_values, enc_codes, enc_rank = values[first], codes[first].astype(np.uint8), rank[first]
    for arr in (enc_values, enc_codes, enc_rank):
        arr.setflags(write=False)
    return LevelTable(fmt, levels, recycled_value, lut, enc_values, enc_codes, enc_rank)


def encode_array(u, table:LevelTable, scale:float=1.0)->np.ndarray:
    '''
    Nearest-level encoding of scaled values, vectorized.
    scale multiplies the grid (NanoMantissa factor); products stay exact since both sides are short dyadics.
    Saturates at +-max level; ties go to the even magnitude code, then to the non-recycled code.
    Inputs must be finite (checked by the block quantizer).
    '''
    u = np.asarray(u, dtype=np.float64)
    vals, rank = table.enc_values * scale, table.enc_rank
    idx = np.searchsorted(vals, u)
    hi = np.clip(idx, 0, len(vals)-1)
    lo = np.clip(idx-1, 0, len(vals)-1)
    d_lo = u - vals[lo]
    d_hi = vals[hi] - u
    take_hi = (d_hi < d_lo) | ((d_hi == d_lo) & (rank[hi] < rank[lo]))
    return table.enc_codes[np.where(take_hi, hi, lo)]

def decode_array(codes, table:LevelTable)->np.ndarray:
    return table.lut[np.asarray(codes, dtype=np.intp)]

def encode_scalar(v_scaled:float, table:LevelTable)->int:
    '''
    Code of the signed level nearest to v_scaled (see encode_array for the tie rule)
    '''
    if not np.isfinite(v_scaled):
        raise errors.NumericInputError(f'Cannot encode non-finite value {v_scaled}')
    return int(encode_array(np.asarray([v_scaled]), table)[0])

def decode_scalar(code:int, table:LevelTable)->float:
    if not 0 <= int(code) < len(table.lut):
        raise ValueError(f'Code {code} is not a {table.fmt.total_bits}-bit pattern')
    return float(table.lut[int(code)])
