"""Heavy-traffic control of a multiclass queue with a shared finite buffer.

Submodules: model (instances), holding_cost (order of accumulation and the
minimizing curve), hjb (free-boundary solver), reflect (reflected Brownian
workload), policy (admission and scheduling), des (event simulation), cli.
"""
__version__ = "0.1.0"
