// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cinttypes>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

namespace slicesim {

// One CSV row. Node rows carry the training loss of one local step; round
// rows (node == -1) carry the eval loss at the round boundary. tokens and
// the simulated-seconds columns are cumulative.
struct MetricRow {
  std::uint64_t round = 0;
  std::uint64_t step = 0;
  int node = -1;
  double loss = 0.0;
  std::uint64_t tokens = 0;
  double sim_comm_s = 0.0;
  double sim_comp_s = 0.0;
};

struct RoundRecord {
  std::uint64_t round = 0;
  double mean_train_loss = 0.0;
  double eval_loss = 0.0;
  double eval_perplexity = 0.0;
  std::uint64_t tokens = 0;
  double sim_comm_s = 0.0;
  double sim_comp_s = 0.0;
};

struct RunMetrics {
  std::vector<MetricRow> rows;
  std::vector<RoundRecord> rounds;

  // Comma-separated, header row, '.' decimal, LF line endings. Doubles are
  // printed with %.17g so the file round-trips bit-exactly.
  std::string to_csv() const {
    std::string out = "round,step,node,loss,tokens,sim_comm_s,sim_comp_s\n";
    char buf[256];
    for (const MetricRow& r : rows) {
      std::snprintf(buf, sizeof(buf), "%" PRIu64 ",%" PRIu64 ",%d,%.17g,%" PRIu64 ",%.17g,%.17g\n",
                    r.round, r.step, r.node, r.loss, r.tokens, r.sim_comm_s, r.sim_comp_s);
      out += buf;
    }
    return out;
  }
};

}  // namespace slicesim
