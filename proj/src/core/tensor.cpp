#include "latentmark/core/tensor.hpp"

#include <sstream>

namespace latentmark {

std::string Tensor::shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

}  // namespace latentmark
