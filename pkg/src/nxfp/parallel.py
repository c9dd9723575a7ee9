import logging
import multiprocessing as mp
from multiprocessing import Pool

from . import helper as helper

'''
Process pool for sweeps over quantization configurations. Results come back in submission order,
so reports do not depend on the number of workers.
'''


def task_unpacker(args):
    func, func_args = args
    return func(*func_args)

def run_parallel(func, arg_tuples:list, workers:int=None)->list:
    '''
    Evaluate func(*args) for each args tuple in arg_tuples.

    PARAMS
    ------
    func: module-level (picklable) function
    arg_tuples (list of tuples)
    **workers (int): pool size; helper.n_workers() when None. Runs in-process for one worker or one task.

    RETURNS
    -------
    list of results, same order as arg_tuples
    '''
    arg_tuples = [tuple(a) for a in arg_tuples]
    if workers is None:
        workers = helper.n_workers()
    workers = max(1, min(workers, len(arg_tuples)))
    if workers == 1:
        return [func(*a) for a in arg_tuples]
    logging.info(f'Parallelizing {len(arg_tuples)} tasks on up to {workers} of {mp.cpu_count()} CPUs')
    with Pool(workers) as pool:
        return pool.map(task_unpacker, [(func, a) for a in arg_tuples])
