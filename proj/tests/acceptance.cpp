// Acceptance gate: runs the criteria and prints one PASS/FAIL line per criterion.
// Usage: acceptance [--criterion N]... [--threads N] [--cache DIR] [--quiet]
// Exit status is 0 only when every selected criterion passes.

#include "psvo/verify.hpp"

#include <cstdlib>
#include <iostream>
#include <string>

int main(int argc, char** argv) {
  using namespace psvo::acceptance;
  VerifyOptions opt;
  opt.log = &std::cout;
  if (const char* root = std::getenv("PSVO_OUTPUT_ROOT"); root != nullptr && *root != '\0') {
    opt.cache_dir = std::filesystem::path(root) / "acceptance_cache";
  }
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    auto next = [&]() -> std::string {
      if (i + 1 >= argc) {
        std::cerr << a << " needs a value\n";
        std::exit(2);
      }
      return argv[++i];
    };
    if (a == "--criterion") {
      opt.only.insert(std::stoi(next()));
    } else if (a == "--threads") {
      opt.threads = std::stoi(next());
    } else if (a == "--cache") {
      opt.cache_dir = next();
    } else if (a == "--quiet") {
      opt.log = nullptr;
    } else {
      std::cerr << "unknown argument '" << a << "'\n";
      return 2;
    }
  }
  const auto results = run_acceptance(opt, std::cout);
  bool ok = !results.empty();
  for (const CriterionResult& r : results) ok = ok && r.pass;
  std::cout << (ok ? "ALL PASS" : "SOME CRITERIA FAILED") << std::endl;
  return ok ? 0 : 1;
}
