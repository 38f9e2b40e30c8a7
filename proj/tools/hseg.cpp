#include <iostream>

#include "hseg/cli.hpp"

#ifdef __GLIBC__
#include <malloc.h>
#endif

int main(int argc, char** argv) {
#ifdef __GLIBC__
  // Training allocates and frees large activation buffers every step; keep
  // them in the heap instead of mapping and unmapping pages each time.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
  return hseg::cli::run(argc, argv, std::cout, std::cerr);
}
