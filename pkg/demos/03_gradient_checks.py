"""Compare every hand-written backward pass with central differences.

    python demos/03_gradient_checks.py
"""
from singdc.gradcheck import run_suite, summarize

for bits in (64, 32):
    print(f"{bits}-bit")
    for op, row in summarize(run_suite(bits=bits, seeds=range(3))).items():
        print(f"  {op:22s} worst relative error {row['max_rel_error']:.1e}  {'ok' if row['passed'] else 'FAIL'}")
