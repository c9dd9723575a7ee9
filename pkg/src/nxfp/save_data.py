import logging
import os
from pathlib import Path

import pandas as pd

from . import helper as helper

'''
Numbered CSV reports. Every report written to a data directory gets a unique, increasing prefix.
'''

FLOAT_FORMAT = '%.9g'


def number_experiment(data_dir=Path('./data'))->int:
    '''
    Largest numeric file prefix in data_dir plus one (1 for an empty or missing directory)
    '''
    path = Path(data_dir)
    if not path.is_dir():
        return 1
    n = 0
    for f in os.listdir(path):
        prefix = helper.get_file_prefix(f)
        if prefix and (path / f).is_file():
            n = max(int(prefix), n)
    return n+1

def name_experiment(experiment_name:str, experiment_params:dict=None, data_dir=Path('./data'))->str:
    '''
    Numeric prefix, then the experiment name, then a tag for every parameter that is swept (list of > 1 values)

    Example:
    name_experiment('ablation', {'element_bits': [4, 5, 6], 'block_size': [32]}) -> '003_ablation_varyelement_bits_32block_size'
    '''
    n = number_experiment(data_dir)
    name = f'{n:03d}_{experiment_name}'
    for key, vals in (experiment_params or {}).items():
        vals = vals if isinstance(vals, list) else [vals]
        if len(vals) > 1:
            name += f'_vary{key}'
        elif key not in ('sweep', 'synth', 'seed', 'n'):
            name += f'_{vals[0]}{key}'
    return name

def write_csv(df:pd.DataFrame, path)->Path:
    '''
    Write a report with a header row, stable column order and 9 significant digits
    '''
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    logging.info(f'Report with {len(df)} rows saved to {path}')
    return path

def save_report(df:pd.DataFrame, experiment_name:str, experiment_params:dict=None, data_dir=Path('./data'))->Path:
    '''
    Save df as <data_dir>/<numbered experiment name>.csv and return the path
    '''
    filename = name_experiment(experiment_name, experiment_params, data_dir=data_dir) + '.csv'
    return write_csv(df, Path(data_dir) / filename)
