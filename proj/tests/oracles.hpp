#pragma once

// Test-only oracles, written independently of the library under test.

#include <cassert>
#include <cmath>
#include <limits>
#include <vector>

namespace oracles {

// Exact optimal transport between uniform empirical distributions by
// min-cost max-flow (successive shortest paths). Marginals are scaled to
// integers: every row node supplies m units, every column node absorbs n,
// so gamma_ij = flow_ij / (n*m). Exact at these sizes.
class MinCostFlow {
 public:
  explicit MinCostFlow(int nodes) : head_(nodes, -1) {}

  void add_edge(int from, int to, long long cap, double cost) {
    edges_.push_back({to, head_[from], cap, cost});
    head_[from] = static_cast<int>(edges_.size()) - 1;
    edges_.push_back({from, head_[to], 0, -cost});
    head_[to] = static_cast<int>(edges_.size()) - 1;
  }

  // Returns total cost of the max flow from s to t.
  double solve(int s, int t) {
    double total = 0.0;
    while (true) {
      // Bellman-Ford on the residual graph (negative residual costs exist).
      int n = static_cast<int>(head_.size());
      std::vector<double> dist(n, std::numeric_limits<double>::infinity());
      std::vector<int> prev_edge(n, -1);
      dist[s] = 0.0;
      for (int round = 0; round < n; ++round) {
        bool changed = false;
        for (int u = 0; u < n; ++u) {
          if (!std::isfinite(dist[u])) continue;
          for (int e = head_[u]; e != -1; e = edges_[e].next) {
            if (edges_[e].cap <= 0) continue;
            double nd = dist[u] + edges_[e].cost;
            if (nd < dist[edges_[e].to] - 1e-15) {
              dist[edges_[e].to] = nd;
              prev_edge[edges_[e].to] = e;
              changed = true;
            }
          }
        }
        if (!changed) break;
      }
      if (prev_edge[t] == -1) break;
      long long push = std::numeric_limits<long long>::max();
      for (int v = t; v != s;) {
        int e = prev_edge[v];
        push = std::min(push, edges_[e].cap);
        v = edges_[e ^ 1].to;
      }
      for (int v = t; v != s;) {
        int e = prev_edge[v];
        edges_[e].cap -= push;
        edges_[e ^ 1].cap += push;
        total += static_cast<double>(push) * edges_[e].cost;
        v = edges_[e ^ 1].to;
      }
    }
    return total;
  }

 private:
  struct Edge {
    int to;
    int next;
    long long cap;
    double cost;
  };
  std::vector<int> head_;
  std::vector<Edge> edges_;
};

// x: n points, y: m points, same dimension; cost ||x_i - y_j||^2.
inline double exact_ot_uniform(const std::vector<std::vector<double>>& x,
                               const std::vector<std::vector<double>>& y) {
  int n = static_cast<int>(x.size());
  int m = static_cast<int>(y.size());
  assert(n > 0 && m > 0);
  int source = 0;
  int sink = n + m + 1;
  MinCostFlow flow(n + m + 2);
  for (int i = 0; i < n; ++i) flow.add_edge(source, 1 + i, m, 0.0);
  for (int j = 0; j < m; ++j) flow.add_edge(1 + n + j, sink, n, 0.0);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < m; ++j) {
      double c = 0.0;
      for (std::size_t k = 0; k < x[i].size(); ++k) {
        double diff = x[i][k] - y[j][k];
        c += diff * diff;
      }
      flow.add_edge(1 + i, 1 + n + j, m, c);
    }
  }
  return flow.solve(source, sink) / (static_cast<double>(n) * m);
}

}  // namespace oracles
