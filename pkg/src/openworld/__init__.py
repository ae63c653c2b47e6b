"""Open-world image classification with rejection and unseen-class discovery.

Submodules:
    tensor      dense tensors with reverse-mode automatic differentiation
    losses      classification / pair / reconstruction losses
    optim       Adam optimizer
    data        IDX ingestion, class splits, pair sampling
    synth       synthetic glyph datasets (stand-ins when MNIST-style files
                are not on disk)
    model       shared-encoder joint model and training loop
    rejection   per-class threshold fitting and open-set prediction
    clustering  distance matrices, complete-linkage clustering, discovery
    metrics     macro-F, rejection P/R/F, pairwise accuracy, NMI
    experiment  end-to-end train / evaluate / discover phases
    cli         command-line entry point
"""

__version__ = "0.1.0"
