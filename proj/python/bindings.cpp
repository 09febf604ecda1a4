#include <pybind11/pybind11.h>
PYBIND11_MODULE(_sopssl, m) { m.doc() = "stub"; }
