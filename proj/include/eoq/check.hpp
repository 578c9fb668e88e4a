#pragma once

#include <stdexcept>
#include <string>

namespace eoq {

struct error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

} // namespace eoq

#define EOQ_CHECK(cond, msg)                                                   \
  do {                                                                         \
    if (!(cond))                                                               \
      throw ::eoq::error(std::string(msg));                                    \
  } while (0)
