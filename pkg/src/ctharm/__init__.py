"""CT kernel harmonization on synthetic phantoms.

Subpackages by responsibility: `tensor` (autodiff engine), `phantom`
(synthetic data + image I/O), `networks` (encoder/generator/discriminator
and Grad-CAM), `training` (window-curriculum adversarial training),
`radiomics` (feature bank and reproducibility metrics), `config` /
`checkpoint` / `cli` (run plumbing).
"""

__version__ = "0.1.0"
