#include <pybind11/pybind11.h>

namespace py = pybind11;

PYBIND11_MODULE(_hyla, m) {
  m.doc() = "Attention-as-hypernetwork layers, reasoning task generators and training utilities";
}
