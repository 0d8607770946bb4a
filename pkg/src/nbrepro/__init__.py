"""Repository-level containerized re-execution and reproducibility assessment
for Jupyter notebooks.

The pipeline acquires web-hosted repositories, infers their dependency
environment from declared manifests and notebook imports, rebuilds that
environment in an isolated container, re-executes every notebook, and
quantifies how faithfully the re-executed outputs match the committed ones.
"""

__version__ = "0.1.0"
