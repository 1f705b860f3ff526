#include <iostream>
#include <string>

#include "CLI11.hpp"

#include "gcp/data.hpp"
#include "gcp/errors.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Write a synthetic 10-class dataset in CIFAR-10 binary layout"};
  std::string out;
  std::size_t train = 10000, test = 2000;
  std::uint64_t seed = 1;
  app.add_option("--out", out, "output directory")->required();
  app.add_option("--train", train, "training images");
  app.add_option("--test", test, "test images");
  app.add_option("--seed", seed, "random seed");
  CLI11_PARSE(app, argc, argv);
  try {
    gcp::write_synthetic_cifar10(out, train, test, seed);
  } catch (const gcp::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  std::cout << "wrote " << train << " training and " << test << " test images to " << out << '\n';
  return 0;
}
