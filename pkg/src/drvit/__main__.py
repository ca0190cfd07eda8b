import os

# cap BLAS threads before numpy loads
_threads = os.environ.get("DRVIT_THREADS")
if _threads:
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[_var] = _threads

from .cli import main  # noqa: E402

main()
