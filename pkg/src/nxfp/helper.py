import itertools
import math
import multiprocessing as mp
import os

import numpy as np


def exact_sum(array)->float:
    '''
    Correctly rounded sum of a float array (math.fsum), independent of summation order.
    Used wherever a reported number must not depend on how blocks were grouped or parallelized.
    '''
    return math.fsum(np.asarray(array, dtype=np.float64).ravel().tolist())

def exact_mean(array)->float:
    '''
    fsum-based mean; returns 0.0 for an empty array
    '''
    array = np.asarray(array, dtype=np.float64)
    if array.size == 0:
        return 0.0
    return exact_sum(array) / array.size

def weighted_mean(values, weights)->float:
    '''
    Weighted mean with exact summation of both numerator and denominator

    PARAMS
    ------
    values: 1D array of per-item values (e.g. per-block MSE)
    weights: 1D array of non-negative weights of the same length (e.g. valid elements per block)
    '''
    values = np.asarray(values, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    total = exact_sum(weights)
    if total == 0:
        return 0.0
    return exact_sum(values * weights) / total

def split_list(s:str)->list:
    '''
    Split a comma separated CLI value, dropping blanks

    Example:
    "mxfp4, bfp4,,nxfp4" -> ['mxfp4', 'bfp4', 'nxfp4']
    '''
    return [item.strip() for item in str(s).split(',') if item.strip()]

def parse_shape(s)->tuple:
    '''
    "64,32" -> (64, 32). Accepts an iterable of ints unchanged.
    '''
    if isinstance(s, str):
        parts = split_list(s)
    else:
        parts = list(s)
    try:
        shape = tuple(int(p) for p in parts)
    except ValueError:
        raise ValueError(f'Invalid shape: {s}')
    if not shape or any(d <= 0 for d in shape):
        raise ValueError(f'Shape must be non-empty with positive dims: {s}')
    return shape

def n_workers()->int:
    '''
    Number of worker processes for sweeps. NXFP_THREADS caps it, otherwise leave one CPU free.
    '''
    env = os.environ.get('NXFP_THREADS')
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ValueError(f'NXFP_THREADS must be an integer, got {env}')
    return max(1, mp.cpu_count()-1)

def params_dict_to_tuples(params_dict:dict):
    '''
    Given dict where some values are singleton lists and others are longer lists, returns a list of all possible tuples of elements where one element comes from each value list.

    Example:
    params_dict = {'a':[1,2], 'b':[3,4]}
    returns [(1,3),(1,4),(2,3),(2,4)] and ['a','b']

    PARAMS
    ------
    params_dict (dict): keys can be anything (generally strings), all values are assumed to be non-empty lists

    RETURNS
    -------
    param_tuples (list of tuples): Each tuple is an ordered set of parameter values with each element coming from the list of values of a different item in param_dict
    list of keys: A list of the keys in the original params_dict, which correspond in order to each of the tuples
    '''
    param_tuples = list(itertools.product(*params_dict.values()))
    return param_tuples, list(params_dict.keys())

def vals_to_list(d):
    '''
    Takes in a dictionary and changes all values to lists that are not already lists
    '''
    d = {k:v if type(v) is list else [v] for k,v in d.items()}
    return d

def get_file_prefix(f)->str:
    '''
    Return the numeric prefix of a string (generally representing a file)

    PARAMS
    ------
    f (str): filename or other string with numeric prefix
    '''
    prefix = ""
    for char in str(f):
        if char.isdigit():
            prefix += char
        else:
            break
    return prefix
