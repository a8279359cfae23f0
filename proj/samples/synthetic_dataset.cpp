// Writes a template-generated 13-category dataset in the corpus layout, for
// trying the CLI without the real data:
//
//   synthetic_dataset OUT_DIR [seed]
//   fewvuln stats --root OUT_DIR

#include <cstdlib>
#include <iostream>

#include "fewvuln/synthetic.hpp"

int main(int argc, char** argv) {
  if (argc < 2) {
    std::cerr << "usage: " << argv[0] << " OUT_DIR [seed]\n";
    return 2;
  }
  const std::uint64_t seed = argc > 2 ? std::strtoull(argv[2], nullptr, 10) : fewvuln::kDefaultSeed;
  const auto corpus = fewvuln::synthetic::make_dataset({}, seed);
  fewvuln::synthetic::write_dataset(corpus, argv[1]);
  std::size_t n = 0;
  for (const auto& [key, s] : corpus.entries) n += s.size();
  std::cout << "wrote " << n << " sentences under " << argv[1] << '\n';
}
