"""
rangeseg command line interface.

A single ``rangeseg`` click group with subcommands for:
- Building range residual images (project, inspect)
- Running the network and k-NN back-projection (infer, postprocess)
- Evaluating predictions (eval, freqs)
- Verification and timing (gradcheck, bench)
- Demo data and weights (synth, init-checkpoint)
"""
