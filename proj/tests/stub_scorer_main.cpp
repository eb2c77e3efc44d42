// scorer/1 stub over stdio, for exercising the subprocess transport.
//
//   stub_scorer [--metric chrf|bleu|len] [--qe] [--name NAME] [--protocol P]
//               [--reverse] [--silent] [--nan] [--exit-after K]
//
// --reverse holds replies until stdin goes quiet, then sends them newest
// first. --silent never replies. --exit-after K exits after K requests.

#include <poll.h>
#include <unistd.h>

#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include "hypens/metrics.hpp"
#include "hypens/scorer.hpp"

namespace {

bool input_pending(int ms) {
  pollfd p{STDIN_FILENO, POLLIN, 0};
  return ::poll(&p, 1, ms) > 0;
}

}  // namespace

int main(int argc, char** argv) {
  std::string metric = "chrf", name, protocol = "scorer/1";
  bool qe = false, reverse = false, silent = false, nan = false;
  long exit_after = -1;
  for (int i = 1; i < argc; ++i) {
    std::string a = argv[i];
    auto next = [&]() -> std::string { return i + 1 < argc ? argv[++i] : ""; };
    if (a == "--metric") metric = next();
    else if (a == "--name") name = next();
    else if (a == "--protocol") protocol = next();
    else if (a == "--qe") qe = true;
    else if (a == "--reverse") reverse = true;
    else if (a == "--silent") silent = true;
    else if (a == "--nan") nan = true;
    else if (a == "--exit-after") exit_after = std::stol(next());
    else {
      std::cerr << "stub_scorer: unknown argument " << a << '\n';
      return 2;
    }
  }
  if (name.empty()) name = metric;

  hypens::ordered_json hs;
  hs["protocol"] = protocol;
  hs["name"] = name;
  hs["needs_reference"] = !qe;
  std::cout << hs.dump() << '\n' << std::flush;

  auto score = [&](const hypens::ScoreRequest& r) {
    const std::string ref = r.ref.value_or(r.src);
    if (metric == "bleu") return hypens::sentence_bleu(r.mt, ref);
    if (metric == "len") return static_cast<double>(r.mt.size());
    return hypens::chrf(r.mt, ref);
  };

  std::vector<std::string> held;
  std::string line;
  long seen = 0;
  while (true) {
    if (reverse && !held.empty() && !input_pending(50)) {
      for (auto it = held.rbegin(); it != held.rend(); ++it) std::cout << *it << '\n';
      std::cout << std::flush;
      held.clear();
    }
    if (!std::getline(std::cin, line)) break;
    if (line.empty()) continue;
    const auto req = hypens::decode_request(line);
    ++seen;
    if (exit_after >= 0 && seen > exit_after) return 0;
    if (silent) continue;
    std::string reply = nan ? "{\"id\":" + std::to_string(req.id) + ",\"score\":NaN}"
                            : hypens::encode_response({req.id, score(req)});
    if (reverse)
      held.push_back(std::move(reply));
    else
      std::cout << reply << '\n' << std::flush;
  }
  return 0;
}
