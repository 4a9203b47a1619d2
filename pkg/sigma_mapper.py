#!/usr/bin/env python3
"""
Sigma Mapper - non-stationary image noise simulation and sigma-map estimation
Synthesizes test suites, trains the CNN estimator and evaluates maps and denoising from the command line
"""

import sys

from sigma_mapper.cli import main

if __name__ == '__main__':
    sys.exit(main())
