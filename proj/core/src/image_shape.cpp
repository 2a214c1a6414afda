#include "featinv/image_shape.hpp"

#include <sstream>
#include <stdexcept>

namespace featinv {

std::string ImageShape::str() const {
  std::ostringstream out;
  out << channels << "x" << height << "x" << width;
  return out.str();
}

void require_shape(const torch::Tensor& t, const ImageShape& shape, const char* what) {
  if (!shape.matches(t)) {
    std::ostringstream msg;
    msg << what << ": expected shape " << shape.str() << ", got " << t.sizes();
    throw std::invalid_argument(msg.str());
  }
}

}  // namespace featinv
