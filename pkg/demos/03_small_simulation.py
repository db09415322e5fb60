"""A short Monte Carlo replication of one simulation cell.

The full cells use 50 runs; 20 keep this demo quick.  Cells whose average
absolute error exceeds 10, or where any run failed to produce an estimate,
print as ">10".
"""

import sys

from twophase.simharness import ScenarioConfig, run_mc, summarize

runs = int(sys.argv[1]) if len(sys.argv) > 1 else 20
config = ScenarioConfig(setting=1, n=400, N=200, event_rate=0.15, n_runs=runs)
results, table = run_mc(config)
print(f"setting 1, N=200, 15% events, {runs} runs: mean |beta_hat - 2|\n")
print(table.render())

failed = {k: c.failures for k, c in table.errors.items() if c.failures}
if failed:
    print("failed fits:", {f"{s.value}/{e.value}": n for (s, e), n in failed.items()})
    print("\nexcluding failed runs instead of capping them:\n")
    print(summarize(results, failures="exclude").render())
