"""Practice corpus: three small modules, two of them deliberately buggy.

The modules double as plain top-level files: a refinement run copies this
directory into its sandbox workdir, so `import arith` works there while
`ata_pytest_shim.corpus.arith` works here. Keep them free of relative
imports for that reason.
"""
