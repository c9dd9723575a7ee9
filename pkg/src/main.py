import logging
import sys
import time

import nxfp.cli as cli

'''
Entry point: python main.py <command> [flags]. See nxfp/cli.py for the commands and python main.py -h.
Experiment batches: python main.py sweep --config experiments.json --out ../data
'''


if __name__ == '__main__':
    start_time = time.perf_counter()
    open('nxfp.log', 'w').close() #truncate the log of the previous run
    logging.basicConfig(filename='nxfp.log', format='%(asctime)s %(levelname)s | %(module)s | %(funcName)s | %(message)s', level=logging.INFO)
    status = cli.main(sys.argv[1:])
    logging.info(f'Total runtime: {time.perf_counter()-start_time}')
    sys.exit(status)
