#!/usr/bin/env python3

"""
Main script to run the test suite for rangeseg.

Modules are run one after another, library modules first and the
command-line tests last.
"""

import argparse
import sys

import pytest

ALL_MODULES = [
    'kitti_io',
    'range_view',
    'tensor_ops',
    'meta_kernel',
    'net_blocks',
    'losses',
    'postproc',
    'evaluation',
    'cli',
]


def main():
    """Main function to run the tests"""
    parser = argparse.ArgumentParser(description='Run rangeseg tests')
    parser.add_argument('--module', type=str, default='all',
                        help=f"Test module to run ({', '.join(ALL_MODULES)}, or all)")
    parser.add_argument('--verbose', '-v', action='store_true',
                        help='Enable verbose output')
    parser.add_argument('--keep-outputs', action='store_true',
                        help='Keep command-line test outputs in test/cli/example_outputs')
    parser.add_argument('--keep-going', action='store_true',
                        help='Do not stop at the first failing test')
    args = parser.parse_args()

    modules = ALL_MODULES if args.module == 'all' else [args.module]
    for module in modules:
        if module not in ALL_MODULES:
            print(f"Error: Unknown module '{module}'. Choose from: {', '.join(ALL_MODULES)}, all")
            return 1

    all_results = []
    for module in modules:
        print(f"\nRunning {module} tests...")

        pytest_args = ["-s", f"test/{module}/test_{module}.py"]
        if not args.keep_going:
            pytest_args.append("-x")
        if args.verbose:
            pytest_args.append("-v")
        if args.keep_outputs:
            pytest_args.append("--keep-outputs")

        result = pytest.main(pytest_args)
        all_results.append(int(result))

    # Return the highest (worst) return code
    return max(all_results)


if __name__ == "__main__":
    sys.exit(main())
