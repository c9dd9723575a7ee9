import json
import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import errors
from . import helper as helper

'''
Tensor sources: npy files, safetensors files, raw binary dumps and seeded synthetic weights.
Every loader returns float32 values converted exactly from the stored dtype.
'''

KINDS = ('npy', 'safetensors', 'raw', 'synthetic')
SYNTH_MODELS = ('gaussian', 'outlier_injected', 'clustered_scattered_pairs')
SYNTH_ALIASES = {'outliers': 'outlier_injected', 'pairs': 'clustered_scattered_pairs'}
DTYPES = {
    'binary16': 'binary16', 'f16': 'binary16', 'fp16': 'binary16', 'float16': 'binary16',
    'bfloat16': 'bfloat16', 'bf16': 'bfloat16',
    'binary32': 'binary32', 'f32': 'binary32', 'fp32': 'binary32', 'float32': 'binary32',
}
ITEMSIZE = {'binary16': 2, 'bfloat16': 2, 'binary32': 4}
SAFETENSORS_DTYPES = {'F16': 'binary16', 'BF16': 'bfloat16', 'F32': 'binary32'}

CLUSTER_LOW = 0.5 #clustered blocks draw magnitudes from [CLUSTER_LOW, 1] * amplitude
SCATTER_OUTLIER = 6.0 #scattered blocks carry one N(0,1) outlier at 6 sigma


def canonical_dtype(dtype)->str:
    key = str(dtype).strip().lower()
    if key not in DTYPES:
        raise errors.DtypeMismatchError(f'Unsupported dtype {dtype}, expected binary16, bfloat16 or binary32')
    return DTYPES[key]


@dataclass(frozen=True)
class TensorSource:
    '''
    Where a tensor comes from.

    PARAMS
    ------
    kind (str): 'npy', 'safetensors', 'raw' or 'synthetic'
    **path (str): file path for the file kinds
    **dtype (str): binary16 / bfloat16 / binary32; required for raw, checked against the file otherwise
    **shape (tuple): required for raw, checked against npy/safetensors when given
    **name (str): tensor name inside a safetensors file
    **model, n, seed, block_size, outlier_ratio: synthetic generator arguments
    '''
    kind: str
    path: Optional[str] = None
    dtype: Optional[str] = None
    shape: Optional[tuple] = None
    name: Optional[str] = None
    model: str = 'gaussian'
    n: Optional[int] = None
    seed: Optional[int] = None
    block_size: int = 32
    outlier_ratio: float = 1.9

    def __post_init__(self):
        if self.kind not in KINDS:
            raise errors.ConfigError(f'Unknown tensor source kind: {self.kind}')
        if self.dtype is not None:
            object.__setattr__(self, 'dtype', canonical_dtype(self.dtype))
        if self.shape is not None:
            object.__setattr__(self, 'shape', helper.parse_shape(self.shape))
        if self.kind == 'raw' and (self.dtype is None or self.shape is None):
            raise errors.ConfigError('Raw binary input needs an explicit dtype and shape')
        if self.kind == 'synthetic' and self.seed is None:
            raise errors.ConfigError('Synthetic weights need an explicit seed')
        if self.kind != 'synthetic' and self.path is None:
            raise errors.ConfigError(f'{self.kind} source needs a path')


def decode_buffer(buf, dtype:str)->np.ndarray:
    '''
    Little-endian bytes -> float32 values. bfloat16 is widened by a 16-bit left shift, so every load is exact.
    '''
    dtype = canonical_dtype(dtype)
    if dtype == 'binary16':
        return np.frombuffer(buf, dtype='<f2').astype(np.float32)
    if dtype == 'bfloat16':
        return (np.frombuffer(buf, dtype='<u2').astype(np.uint32) << 16).view(np.float32)
    return np.frombuffer(buf, dtype='<f4').astype(np.float32)

def _check_declared(src:TensorSource, dtype:str, shape:tuple):
    if src.dtype is not None and src.dtype != dtype:
        raise errors.DtypeMismatchError(f'{src.path}: stored dtype {dtype}, declared {src.dtype}')
    if src.shape is not None and tuple(src.shape) != tuple(shape):
        raise errors.DtypeMismatchError(f'{src.path}: stored shape {tuple(shape)}, declared {tuple(src.shape)}')

def load_npy(src:TensorSource)->np.ndarray:
    '''
    npy v1/v2 reader for float16/float32 arrays
    '''
    with open(src.path, 'rb') as f:
        try:
            version = np.lib.format.read_magic(f)
            if version == (1, 0):
                shape, fortran_order, dtype = np.lib.format.read_array_header_1_0(f)
            elif version == (2, 0):
                shape, fortran_order, dtype = np.lib.format.read_array_header_2_0(f)
            else:
                raise errors.MalformedHeaderError(f'{src.path}: unsupported npy version {version}')
        except ValueError as e:
            if isinstance(e, errors.NxfpError):
                raise
            raise errors.MalformedHeaderError(f'{src.path}: {e}')
        data = f.read()
    if dtype.kind != 'f' or dtype.itemsize not in (2, 4):
        raise errors.DtypeMismatchError(f'{src.path}: npy dtype {dtype} is not binary16 or binary32')
    stored = 'binary16' if dtype.itemsize == 2 else 'binary32'
    _check_declared(src, stored, shape)
    count = math.prod(shape)
    need = count * dtype.itemsize
    if len(data) < need:
        raise errors.TruncatedDataError(f'{src.path}: {len(data)} data bytes, shape {shape} needs {need}')
    values = np.frombuffer(data[:need], dtype=dtype).astype(np.float32)
    return values.reshape(shape, order='F' if fortran_order else 'C')

def read_safetensors_header(path)->tuple:
    '''
    RETURNS
    -------
    header (dict): tensor name -> {dtype, shape, data_offsets}, "__metadata__" removed
    data_start (int): byte offset of the data region
    file_size (int)
    '''
    with open(path, 'rb') as f:
        head = f.read(8)
        if len(head) < 8:
            raise errors.TruncatedDataError(f'{path}: missing safetensors header length')
        header_len = int.from_bytes(head, 'little')
        raw = f.read(header_len)
        if len(raw) < header_len:
            raise errors.TruncatedDataError(f'{path}: header needs {header_len} bytes, file has {len(raw)}')
        f.seek(0, 2)
        file_size = f.tell()
    try:
        header = json.loads(raw.decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise errors.MalformedHeaderError(f'{path}: safetensors header is not JSON: {e}')
    if not isinstance(header, dict):
        raise errors.MalformedHeaderError(f'{path}: safetensors header is not an object')
    header.pop('__metadata__', None)
    for name, info in header.items():
        if not isinstance(info, dict) or not {'dtype', 'shape', 'data_offsets'} <= info.keys():
            raise errors.MalformedHeaderError(f'{path}: entry {name} lacks dtype/shape/data_offsets')
    return header, 8 + header_len, file_size

def list_tensors(path)->dict:
    '''
    name -> (dtype, shape) for every tensor of a safetensors file
    '''
    header, _, _ = read_safetensors_header(path)
    return {name: (info['dtype'], tuple(info['shape'])) for name, info in header.items()}

def load_safetensors(src:TensorSource)->np.ndarray:
    header, data_start, file_size = read_safetensors_header(src.path)
    name = src.name
    if name is None:
        if len(header) != 1:
            raise errors.UnknownTensorError(f'{src.path} holds {len(header)} tensors, pick one of {sorted(header)}')
        name = next(iter(header))
    if name not in header:
        raise errors.UnknownTensorError(f'{src.path}: no tensor named {name}')
    info = header[name]
    if info['dtype'] not in SAFETENSORS_DTYPES:
        raise errors.DtypeMismatchError(f'{src.path}: tensor {name} has unsupported dtype {info["dtype"]}')
    dtype = SAFETENSORS_DTYPES[info['dtype']]
    shape = tuple(int(d) for d in info['shape'])
    _check_declared(src, dtype, shape)
    start, end = (int(o) for o in info['data_offsets'])
    if end - start != math.prod(shape) * ITEMSIZE[dtype]:
        raise errors.MalformedHeaderError(f'{src.path}: tensor {name} spans {end - start} bytes, shape {shape} needs {math.prod(shape) * ITEMSIZE[dtype]}')
    if data_start + end > file_size:
        raise errors.TruncatedDataError(f'{src.path}: tensor {name} ends past the end of the file')
    with open(src.path, 'rb') as f:
        f.seek(data_start + start)
        buf = f.read(end - start)
    return decode_buffer(buf, dtype).reshape(shape)

def load_raw(src:TensorSource)->np.ndarray:
    with open(src.path, 'rb') as f:
        buf = f.read()
    need = math.prod(src.shape) * ITEMSIZE[src.dtype]
    if len(buf) < need:
        raise errors.TruncatedDataError(f'{src.path}: {len(buf)} bytes, shape {src.shape} as {src.dtype} needs {need}')
    if len(buf) > need:
        raise errors.DtypeMismatchError(f'{src.path}: {len(buf)} bytes do not match shape {src.shape} as {src.dtype} ({need} bytes)')
    return decode_buffer(buf, src.dtype).reshape(src.shape)

def load_tensor(src:TensorSource)->np.ndarray:
    '''
    Dispatch on the source kind and return float32 values
    '''
    if src.kind == 'npy':
        values = load_npy(src)
    elif src.kind == 'safetensors':
        values = load_safetensors(src)
    elif src.kind == 'raw':
        values = load_raw(src)
    else:
        values = synth_weights(src.model, src.n, src.seed, block_size=src.block_size, outlier_ratio=src.outlier_ratio)
        if src.shape is not None:
            values = values.reshape(src.shape)
    logging.info(f'Loaded {src.kind} tensor {src.name or src.path or src.model}: shape {values.shape}')
    return values

def pair_labels(n:int, block_size:int=32)->np.ndarray:
    '''
    True for the clustered blocks of the clustered_scattered_pairs generator (even block indices)
    '''
    return np.arange(math.ceil(n / block_size)) % 2 == 0

def _inject_outliers(values:np.ndarray, block_size:int, ratio:float)->np.ndarray:
    '''
    In every block with at least two elements, set the largest magnitude to ratio times the second largest
    '''
    out = values.copy()
    for start in range(0, out.size, block_size):
        block = out[start:start + block_size]
        if block.size < 2:
            continue
        order = np.argsort(np.abs(block))
        top, second = order[-1], order[-2]
        sign = 1.0 if block[top] >= 0 else -1.0
        block[top] = sign * ratio * abs(block[second])
    return out

def _clustered_scattered(n:int, block_size:int, rng)->np.ndarray:
    out = np.empty(n)
    for k, start in enumerate(range(0, n, block_size)):
        size = min(block_size, n - start)
        if k % 2 == 0:
            amplitude = np.exp2(rng.uniform(-3, 3))
            mags = rng.uniform(CLUSTER_LOW, 1.0, size) * amplitude
            out[start:start + size] = mags * rng.choice([-1.0, 1.0], size)
        else:
            block = rng.standard_normal(size)
            block[rng.integers(size)] = SCATTER_OUTLIER * rng.choice([-1.0, 1.0])
            out[start:start + size] = block
    return out

def synth_weights(model:str, n:int, seed:int, block_size:int=32, outlier_ratio:float=1.9)->np.ndarray:
    '''
    Seeded synthetic weights, float32.

    PARAMS
    ------
    model (str):
        'gaussian': i.i.d. N(0, 1). At block size 32 the block maximum sits near 2-3 sigma, so after dividing
            by the block scale the values span roughly [-8, 8].
        'outlier_injected' (alias 'outliers'): gaussian, then per block the largest magnitude is set to
            outlier_ratio times the second largest.
        'clustered_scattered_pairs' (alias 'pairs'): alternating blocks. Even blocks are value-clustered
            (magnitudes uniform in [0.5, 1] times a random amplitude, random signs); odd blocks are
            value-scattered (N(0, 1) with one element at +-6). See pair_labels.
    n (int): number of values, > 0
    seed (int)
    **block_size (int): block grid the per-block models refer to
    **outlier_ratio (float)
    '''
    model = SYNTH_ALIASES.get(model, model)
    if model not in SYNTH_MODELS:
        raise errors.ConfigError(f'Unknown synthetic model: {model}')
    if n is None or int(n) <= 0:
        raise errors.ConfigError(f'Synthetic tensor needs n > 0, got {n}')
    if seed is None:
        raise errors.ConfigError('Synthetic weights need an explicit seed')
    n = int(n)
    rng = np.random.default_rng(seed)
    if model == 'clustered_scattered_pairs':
        values = _clustered_scattered(n, block_size, rng)
    else:
        values = rng.standard_normal(n)
        if model == 'outlier_injected':
            values = _inject_outliers(values, block_size, outlier_ratio)
    return values.astype(np.float32)

def write_npy(path, values)->None:
    '''
    Minimal npy writer for dequantized output (float16 or float32 as given)
    '''
    np.save(path, np.ascontiguousarray(values), allow_pickle=False)
    logging.info(f'Wrote {path}: shape {np.shape(values)}, dtype {np.asarray(values).dtype}')
