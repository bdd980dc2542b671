"""Online training of deep surrogate models from streaming solver ensembles.

Solver clients stream simulation timesteps over TCP to a training server;
the server shards samples into bias-mitigating memory buffers and trains a
neural surrogate as the data arrives, so no intermediate trajectory files
ever touch the disk.  A fault-tolerant launcher supervises the ensemble.

Submodules: wire (binary protocol), buffer (sample stores), solvers
(heat / Lorenz / advection generators), sampler (parameter spaces),
trainer (MLP + SGD), server, client_api, launcher, harness, dataset,
config, cli.
"""

__version__ = "0.1.0"
