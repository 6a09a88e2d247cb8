#include "requant/errors.hpp"

namespace requant {

const char* to_string(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::config: return "config";
        case ErrorKind::format: return "format";
        case ErrorKind::numerical: return "numerical";
        case ErrorKind::training: return "training";
        case ErrorKind::parameter: return "parameter";
    }
    return "unknown";
}

}  // namespace requant
