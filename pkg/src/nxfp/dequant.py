import logging
from enum import Enum

import numpy as np

from . import errors
from . import quant as quant

'''
On-the-fly dequantization of packed blocks and a reference GEMM over dequantized operands.

Values are first reconstructed exactly in float64 (level * NanoMantissa factor * 2^(E_shared - emax),
all short dyadics) and rounded once, at the target precision.
'''


class DequantTarget(str, Enum):
    BINARY16 = 'binary16'
    BFLOAT16 = 'bfloat16'
    BINARY32 = 'binary32'


TARGET_ALIASES = {
    'f16': DequantTarget.BINARY16, 'fp16': DequantTarget.BINARY16, 'float16': DequantTarget.BINARY16,
    'bf16': DequantTarget.BFLOAT16,
    'f32': DequantTarget.BINARY32, 'fp32': DequantTarget.BINARY32, 'float32': DequantTarget.BINARY32,
}


def dequant_target(spec)->DequantTarget:
    '''
    "binary16" / "f16" / "bf16" / ... -> DequantTarget
    '''
    if isinstance(spec, DequantTarget):
        return spec
    s = str(spec).strip().lower()
    if s in TARGET_ALIASES:
        return TARGET_ALIASES[s]
    try:
        return DequantTarget(s)
    except ValueError:
        raise errors.ConfigError(f'Unknown dequantization target: {spec}')

def round_bfloat16(values)->np.ndarray:
    '''
    Round to bfloat16 with round-to-nearest-even on the binary32 bit pattern.
    The result is held in float32 (the low 16 bits are zero).
    '''
    f32 = np.ascontiguousarray(values, dtype=np.float32)
    bits = f32.view(np.uint32).astype(np.uint64)
    bits = (bits + 0x7FFF + ((bits >> 16) & 1)) & 0xFFFF0000
    return bits.astype(np.uint32).view(np.float32).reshape(f32.shape)

def to_target(values, target)->np.ndarray:
    '''
    Round exact float64 values once to the target precision

    RETURNS
    -------
    float16 array for binary16, float32 array otherwise
    '''
    target = dequant_target(target)
    values = np.asarray(values, dtype=np.float64)
    if target == DequantTarget.BINARY16:
        #numpy converts double -> half with a single round-to-nearest-even
        return values.astype(np.float16)
    if target == DequantTarget.BFLOAT16:
        return round_bfloat16(values.astype(np.float32))
    return values.astype(np.float32)

def dequantize_block(scale:quant.BlockScale, codes, cfg:quant.QuantConfig, target=DequantTarget.BINARY32)->np.ndarray:
    '''
    Decode one block: slice sign and magnitude, look up the level (MxFP or BFP table by the fmt bit, with the
    recycled -0 code remapped), multiply by 1 + m/4, add the shared exponent, round to the target.

    PARAMS
    ------
    scale (BlockScale): e_shared, m_nano, fmt; the reserved zero-block exponent yields all zeros
    codes: block_size element codes
    cfg (QuantConfig)
    **target (DequantTarget or str)
    '''
    codes = np.asarray(codes)
    if codes.shape != (cfg.block_size,):
        raise ValueError(f'Expected {cfg.block_size} codes, got shape {codes.shape}')
    if np.any((codes < 0) | (codes >= 2**cfg.element_bits)):
        raise ValueError(f'Code out of range for {cfg.element_bits}-bit elements')
    exact = quant.reconstruct(codes[None, :], [scale.e_shared], [scale.m_nano], [scale.fmt], cfg)[0]
    return to_target(exact, target)

def dequantize_exact(packed)->np.ndarray:
    '''
    Exact float64 values of a PackedTensor in its logical shape
    '''
    full = quant.reconstruct(packed.codes, packed.e_shared, packed.m_nano, packed.fmt, packed.cfg)
    return full.ravel()[:packed.logical_len].reshape(packed.shape)

def dequantize_tensor(packed, target=DequantTarget.BINARY32)->np.ndarray:
    '''
    Dequantize every block of a PackedTensor, drop the padding, and reshape to the logical shape
    '''
    out = to_target(dequantize_exact(packed), target)
    logging.debug(f'Dequantized {packed.n_blocks} blocks of {packed.cfg.label} to {dequant_target(target).value}')
    return out

def matmul_sequential(a, b)->np.ndarray:
    '''
    a @ b in binary32, accumulating over the inner dimension in index order k = 0, 1, ..., K-1

    PARAMS
    ------
    a: (M, K) array
    b: (K, N) array
    '''
    a = np.asarray(a, dtype=np.float32)
    b = np.asarray(b, dtype=np.float32)
    acc = np.zeros((a.shape[0], b.shape[1]), dtype=np.float32)
    for k in range(a.shape[1]):
        acc += a[:, k, None] * b[None, k, :]
    return acc

def gemm_dequant(a, b, target=DequantTarget.BINARY32)->np.ndarray:
    '''
    Dequantize the operands to the target precision, then multiply with binary32 sequential accumulation.

    PARAMS
    ------
    a (PackedTensor): 2D (M, K)
    b (PackedTensor or array): (K, N) or (K,); a plain array is used as given, cast to binary32
    **target: precision the operands are dequantized to before the MAC

    RETURNS
    -------
    float32 (M, N) matrix, or (M,) when b is a vector
    '''
    a_vals = dequantize_tensor(a, target) if hasattr(a, 'codes') else np.asarray(a)
    if hasattr(b, 'codes'):
        b_vals = dequantize_tensor(b, target)
    else:
        b_vals = np.asarray(b)
    if a_vals.ndim != 2:
        raise ValueError(f'Left operand must be 2D, got shape {a_vals.shape}')
    vector = b_vals.ndim == 1
    if vector:
        b_vals = b_vals[:, None]
    if b_vals.ndim != 2 or a_vals.shape[1] != b_vals.shape[0]:
        raise ValueError(f'Shape mismatch: {a_vals.shape} x {b_vals.shape if not vector else b_vals.shape[:1]}')
    out = matmul_sequential(a_vals, b_vals)
    return out[:, 0] if vector else out
