import logging
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
import pandas as pd

from . import errors
from . import quant as quant

'''
Packed tensors and the .nxt byte layout.

    "NXT1" | u32 version | u32 header length | UTF-8 header (key=value lines)
    | scales: 1 byte per block (E_shared + 127, 0xFF = zero block)
    | sidecar: per block 2-bit m_nano (if NanoMantissa) then 1-bit fmt (if Adaptive), LSB-first
    | payload: B-bit codes, block-major, LSB-first within little-endian bytes

All integers are little-endian. Each section is padded to a byte boundary with zero bits.
'''

MAGIC = b'NXT1'
VERSION = 1
PREAMBLE_BYTES = 12
SCALE_BIAS = 127
ZERO_SCALE_BYTE = 0xFF
HEADER_KEYS = ('shape', 'logical_len', 'block_size', 'element_bits', 'microexp_bits', 'nano', 'adaptive',
               'recycle', 'recycle_rule', 'nano_search')


def pack_bits(values, width:int)->bytes:
    '''
    Pack unsigned integers of width bits each, LSB-first, into bytes (last byte zero-padded)
    '''
    values = np.asarray(values, dtype=np.uint16).ravel()
    bits = (values[:, None] >> np.arange(width, dtype=np.uint16)) & 1
    return np.packbits(bits.astype(np.uint8).ravel(), bitorder='little').tobytes()

def unpack_bits(data, width:int, count:int, bit_offset:int=0)->np.ndarray:
    '''
    Inverse of pack_bits: read count fields of width bits starting bit_offset bits into data
    '''
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder='little')
    bits = bits[bit_offset:bit_offset + count*width].reshape(count, width).astype(np.uint16)
    return (bits << np.arange(width, dtype=np.uint16)).sum(axis=1).astype(np.uint8)

def sidecar_bits_per_block(cfg:quant.QuantConfig)->int:
    return 2*int(cfg.nano_enabled) + int(cfg.adaptive_enabled)

def footprint_bits_per_element(cfg:quant.QuantConfig)->Fraction:
    '''
    Exact bits per element: B + (8 + 2*[nano] + [adaptive]) / block_size. Code Recycling costs nothing.

    Example:
    MxFP4 @ 32 -> 17/4 (4.25), NxFP4 @ 32 -> 139/32 (4.34375)
    '''
    return Fraction(cfg.element_bits) + Fraction(8 + sidecar_bits_per_block(cfg), cfg.block_size)


@dataclass(frozen=True, eq=False)
class PackedTensor:
    '''
    A quantized tensor: per-block scales and block-major element codes.

    PARAMS
    ------
    shape (tuple): logical shape, positive dims
    cfg (QuantConfig)
    e_shared (np.ndarray): int16 per block, quant.ZERO_BLOCK for zero blocks
    m_nano (np.ndarray): uint8 per block, 0 when NanoMantissa is disabled
    fmt (np.ndarray): uint8 per block, 1 = MxFP, 0 = BFP
    codes (np.ndarray): uint8 (n_blocks, block_size); padding lanes hold code 0
    '''
    shape: tuple
    cfg: quant.QuantConfig
    e_shared: np.ndarray
    m_nano: np.ndarray
    fmt: np.ndarray
    codes: np.ndarray

    def __post_init__(self):
        shape = tuple(int(d) for d in self.shape)
        if not shape or any(d <= 0 for d in shape):
            raise errors.NumericInputError(f'zero-length tensor of shape {self.shape}')
        object.__setattr__(self, 'shape', shape)
        n = self.n_blocks
        for name, dtype in (('e_shared', np.int16), ('m_nano', np.uint8), ('fmt', np.uint8)):
            arr = np.asarray(getattr(self, name)).astype(dtype).ravel()
            if arr.shape != (n,):
                raise errors.LengthMismatchError(f'{name} has {arr.size} entries, expected {n} blocks')
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        codes = np.asarray(self.codes).astype(np.uint8)
        if codes.shape != (n, self.cfg.block_size):
            raise errors.LengthMismatchError(f'codes have shape {codes.shape}, expected {(n, self.cfg.block_size)}')
        codes.setflags(write=False)
        object.__setattr__(self, 'codes', codes)
        self._validate_fields()

    def _validate_fields(self):
        cfg = self.cfg
        e, zero = self.e_shared, self.e_shared == quant.ZERO_BLOCK
        if np.any(~zero & ((e < quant.E_MIN) | (e > quant.E_MAX))):
            raise errors.HeaderError('shared exponent outside [-127, 127]')
        if np.any(self.codes >= 2**cfg.element_bits):
            raise errors.HeaderError(f'code outside the {cfg.element_bits}-bit range')
        if np.any(self.m_nano > 3) or (not cfg.nano_enabled and np.any(self.m_nano != 0)):
            raise errors.HeaderError('NanoMantissa set on a tensor without NanoMantissa')
        allowed = cfg.candidate_fmts()
        if np.any(~np.isin(self.fmt, allowed)):
            raise errors.HeaderError(f'fmt bit outside {allowed}')

    @property
    def logical_len(self)->int:
        return math.prod(self.shape)

    @property
    def n_blocks(self)->int:
        return math.ceil(self.logical_len / self.cfg.block_size)

    @property
    def scales(self)->bytes:
        '''
        Encoded scale section: biased exponent bytes followed by the packed sidecar stream
        '''
        zero = self.e_shared == quant.ZERO_BLOCK
        exp_bytes = np.where(zero, ZERO_SCALE_BYTE, self.e_shared.astype(np.int32) + SCALE_BIAS).astype(np.uint8)
        return exp_bytes.tobytes() + self._sidecar()

    def _sidecar(self)->bytes:
        fields = []
        if self.cfg.nano_enabled:
            fields += [self.m_nano & 1, (self.m_nano >> 1) & 1]
        if self.cfg.adaptive_enabled:
            fields.append(self.fmt & 1)
        if not fields:
            return b''
        return pack_bits(np.stack(fields, axis=1), 1)

    @property
    def payload(self)->bytes:
        return pack_bits(self.codes, self.cfg.element_bits)

    def block(self, k:int):
        '''
        (BlockScale, codes) of block k
        '''
        if not 0 <= k < self.n_blocks:
            raise IndexError(f'Block {k} out of range for {self.n_blocks} blocks')
        scale = quant.BlockScale(int(self.e_shared[k]), int(self.m_nano[k]), int(self.fmt[k]))
        return scale, self.codes[k]

    def __eq__(self, other):
        if not isinstance(other, PackedTensor):
            return NotImplemented
        return (self.shape == other.shape and self.cfg == other.cfg
                and all(np.array_equal(getattr(self, f), getattr(other, f)) for f in ('e_shared', 'm_nano', 'fmt', 'codes')))

    __hash__ = None


def footprint_bits(packed:PackedTensor)->int:
    '''
    blocks * (B*block_size + 8 + 2*[nano] + [adaptive]), before byte alignment
    '''
    cfg = packed.cfg
    return packed.n_blocks * (cfg.element_bits*cfg.block_size + 8 + sidecar_bits_per_block(cfg))

def header_text(packed:PackedTensor)->str:
    cfg = packed.cfg
    items = {
        'shape': ','.join(str(d) for d in packed.shape),
        'logical_len': packed.logical_len,
        'block_size': cfg.block_size,
        'element_bits': cfg.element_bits,
        'microexp_bits': cfg.microexp_bits,
        'nano': int(cfg.nano_enabled),
        'adaptive': int(cfg.adaptive_enabled),
        'recycle': int(cfg.recycle_enabled),
        'recycle_rule': str(cfg.recycle_rule),
        'nano_search': cfg.nano_search,
    }
    return ''.join(f'{k}={v}\n' for k, v in items.items())

def serialized_size(packed:PackedTensor)->int:
    '''
    12 + header + blocks + ceil(sidecar bits / 8) + ceil(payload bits / 8) bytes
    '''
    cfg, n = packed.cfg, packed.n_blocks
    return (PREAMBLE_BYTES + len(header_text(packed).encode('utf-8')) + n
            + math.ceil(n*sidecar_bits_per_block(cfg) / 8) + math.ceil(n*cfg.block_size*cfg.element_bits / 8))

def serialize(packed:PackedTensor)->bytes:
    header = header_text(packed).encode('utf-8')
    preamble = MAGIC + VERSION.to_bytes(4, 'little') + len(header).to_bytes(4, 'little')
    return preamble + header + packed.scales + packed.payload

def parse_header(text:str)->tuple:
    '''
    Parse the key=value header

    RETURNS
    -------
    shape (tuple), logical_len (int), cfg (QuantConfig)
    '''
    items = {}
    for line in text.splitlines():
        if not line:
            continue
        key, sep, value = line.partition('=')
        if not sep:
            raise errors.HeaderError(f'Malformed header line: {line!r}')
        items[key.strip()] = value.strip()
    missing = [k for k in HEADER_KEYS if k not in items]
    if missing:
        raise errors.HeaderError(f'Header is missing {missing}')
    try:
        shape = tuple(int(d) for d in items['shape'].split(','))
        logical_len = int(items['logical_len'])
        cfg = quant.QuantConfig(
            block_size=int(items['block_size']),
            element_bits=int(items['element_bits']),
            microexp_bits=int(items['microexp_bits']),
            nano_enabled=bool(int(items['nano'])),
            adaptive_enabled=bool(int(items['adaptive'])),
            recycle_enabled=bool(int(items['recycle'])),
            recycle_rule=items['recycle_rule'],
            nano_search=items['nano_search'],
        )
    except errors.ConfigError as e:
        raise errors.HeaderError(f'Invalid configuration in header: {e}')
    except ValueError as e:
        raise errors.HeaderError(f'Unparseable header value: {e}')
    if not shape or any(d <= 0 for d in shape):
        raise errors.HeaderError(f'Invalid shape in header: {items["shape"]}')
    return shape, logical_len, cfg

def _read_preamble(data:bytes)->tuple:
    '''
    Validate magic/version/header and return (shape, cfg, offset of the scale section)
    '''
    if len(data) < len(MAGIC):
        if MAGIC.startswith(data):
            raise errors.TruncatedStreamError(f'Stream of {len(data)} bytes is shorter than the preamble')
        raise errors.BadMagicError(f'Bad magic {data!r}')
    if data[:4] != MAGIC:
        raise errors.BadMagicError(f'Bad magic {bytes(data[:4])!r}, expected {MAGIC!r}')
    if len(data) < PREAMBLE_BYTES:
        raise errors.TruncatedStreamError(f'Stream of {len(data)} bytes is shorter than the preamble')
    version = int.from_bytes(data[4:8], 'little')
    if version != VERSION:
        raise errors.UnsupportedVersionError(f'Unsupported container version {version}')
    header_len = int.from_bytes(data[8:12], 'little')
    end = PREAMBLE_BYTES + header_len
    if len(data) < end:
        raise errors.TruncatedStreamError(f'Header needs {header_len} bytes, stream has {len(data) - PREAMBLE_BYTES}')
    try:
        text = bytes(data[PREAMBLE_BYTES:end]).decode('utf-8')
    except UnicodeDecodeError:
        raise errors.HeaderError('Header is not valid UTF-8')
    shape, logical_len, cfg = parse_header(text)
    if logical_len != math.prod(shape):
        raise errors.LengthMismatchError(f'logical_len {logical_len} does not match shape {shape}')
    return shape, cfg, end

def _section_sizes(cfg:quant.QuantConfig, n_blocks:int)->tuple:
    return (n_blocks, math.ceil(n_blocks*sidecar_bits_per_block(cfg) / 8),
            math.ceil(n_blocks*cfg.block_size*cfg.element_bits / 8))

def _decode_scales(exp_bytes, sidecar:bytes, cfg:quant.QuantConfig, count:int, first_block:int=0)->tuple:
    exp_bytes = np.frombuffer(exp_bytes, dtype=np.uint8)
    e_shared = np.where(exp_bytes == ZERO_SCALE_BYTE, quant.ZERO_BLOCK, exp_bytes.astype(np.int16) - SCALE_BIAS).astype(np.int16)
    m_nano = np.zeros(count, dtype=np.uint8)
    fmt = np.full(count, cfg.primary_fmt_bit, dtype=np.uint8)
    width = sidecar_bits_per_block(cfg)
    if width:
        fields = unpack_bits(sidecar, 1, count*width, first_block*width).reshape(count, width)
        if cfg.nano_enabled:
            m_nano = (fields[:, 0] | (fields[:, 1] << 1)).astype(np.uint8)
        if cfg.adaptive_enabled:
            fmt = fields[:, -1].astype(np.uint8)
    return e_shared, m_nano, fmt

def deserialize(data:bytes)->PackedTensor:
    '''
    Parse a .nxt byte stream.

    RAISES
    ------
    BadMagicError, UnsupportedVersionError, TruncatedStreamError, LengthMismatchError (trailing bytes or
    logical_len != prod(shape)), HeaderError (malformed header or invalid field values)
    '''
    data = bytes(data)
    shape, cfg, offset = _read_preamble(data)
    n = math.ceil(math.prod(shape) / cfg.block_size)
    n_exp, n_side, n_payload = _section_sizes(cfg, n)
    expected = offset + n_exp + n_side + n_payload
    if len(data) < expected:
        raise errors.TruncatedStreamError(f'Stream has {len(data)} bytes, layout needs {expected}')
    if len(data) > expected:
        raise errors.LengthMismatchError(f'{len(data) - expected} trailing bytes after the payload')
    exp_bytes = data[offset:offset + n_exp]
    sidecar = data[offset + n_exp:offset + n_exp + n_side]
    e_shared, m_nano, fmt = _decode_scales(exp_bytes, sidecar, cfg, n)
    codes = unpack_bits(data[offset + n_exp + n_side:], cfg.element_bits, n*cfg.block_size).reshape(n, cfg.block_size)
    return PackedTensor(shape=shape, cfg=cfg, e_shared=e_shared, m_nano=m_nano, fmt=fmt, codes=codes)

def read_block_codes(data:bytes, k:int)->tuple:
    '''
    Random access: decode only block k of a serialized tensor (fixed-width fields, offsets are computable)

    RETURNS
    -------
    (BlockScale, codes)
    '''
    data = bytes(data)
    shape, cfg, offset = _read_preamble(data)
    n = math.ceil(math.prod(shape) / cfg.block_size)
    if not 0 <= k < n:
        raise IndexError(f'Block {k} out of range for {n} blocks')
    n_exp, n_side, n_payload = _section_sizes(cfg, n)
    if len(data) < offset + n_exp + n_side + n_payload:
        raise errors.TruncatedStreamError('Stream ends before the payload does')
    e_shared, m_nano, fmt = _decode_scales(data[offset + k:offset + k + 1], data[offset + n_exp:offset + n_exp + n_side], cfg, 1, k)
    bits = cfg.block_size * cfg.element_bits
    start = offset + n_exp + n_side + (k*bits) // 8
    chunk = data[start:start + math.ceil(((k*bits) % 8 + bits) / 8)]
    codes = unpack_bits(chunk, cfg.element_bits, cfg.block_size, (k*bits) % 8)
    return quant.BlockScale(int(e_shared[0]), int(m_nano[0]), int(fmt[0])), codes

def save(packed:PackedTensor, path)->int:
    data = serialize(packed)
    with open(path, 'wb') as f:
        f.write(data)
    logging.info(f'Wrote {path}: {packed.n_blocks} blocks of {packed.cfg.label}, {len(data)} bytes')
    return len(data)

def load(path)->PackedTensor:
    with open(path, 'rb') as f:
        data = f.read()
    return deserialize(data)

def model_footprint(tensors:dict, cfg:quant.QuantConfig)->pd.DataFrame:
    '''
    Footprint of a whole tensor inventory stored with one configuration.

    PARAMS
    ------
    tensors (dict): name -> shape (or array, whose shape is used)
    cfg (QuantConfig)

    RETURNS
    -------
    DataFrame with one row per tensor (tensor, elements, blocks, footprint_bits, footprint_bytes)
    and a final "total" row
    '''
    rows = []
    for name, t in tensors.items():
        shape = np.shape(t) if hasattr(t, 'shape') else tuple(t)
        elements = math.prod(shape)
        blocks = math.ceil(elements / cfg.block_size)
        bits = blocks * (cfg.element_bits*cfg.block_size + 8 + sidecar_bits_per_block(cfg))
        rows.append({'tensor': name, 'elements': elements, 'blocks': blocks, 'footprint_bits': bits,
                     'footprint_bytes': math.ceil(bits / 8)})
    df = pd.DataFrame(rows, columns=['tensor', 'elements', 'blocks', 'footprint_bits', 'footprint_bytes'])
    total = {'tensor': 'total', **{c: int(df[c].sum()) for c in df.columns[1:]}}
    return pd.concat([df, pd.DataFrame([total])], ignore_index=True)
