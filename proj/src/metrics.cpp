#include "icft/metrics.hpp"

#include <vector>

namespace icft {

std::vector<std::string> whitespace_tokens(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : text) {
        if (c == ' ' || c == '\t' || c == '\n' || c == '\r') {
            if (!cur.empty()) out.push_back(std::move(cur));
            cur.clear();
        } else {
            cur += c;
        }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

int lcs_length(const std::vector<std::string>& a, const std::vector<std::string>& b) {
    const size_t n = a.size(), m = b.size();
    if (n == 0 || m == 0) return 0;
    std::vector<int> prev(m + 1, 0), cur(m + 1, 0);
    for (size_t i = 1; i <= n; ++i) {
        for (size_t j = 1; j <= m; ++j) {
            if (a[i - 1] == b[j - 1])
                cur[j] = prev[j - 1] + 1;
            else
                cur[j] = std::max(prev[j], cur[j - 1]);
        }
        std::swap(prev, cur);
    }
    return prev[m];
}

double rouge_l(const std::string& prediction, const std::string& reference) {
    const auto pred = whitespace_tokens(prediction);
    const auto ref = whitespace_tokens(reference);
    if (pred.empty() || ref.empty()) return 0.0;
    const int lcs = lcs_length(pred, ref);
    if (lcs == 0) return 0.0;
    const double r = static_cast<double>(lcs) / static_cast<double>(ref.size());
    const double p = static_cast<double>(lcs) / static_cast<double>(pred.size());
    return 2.0 * r * p / (r + p);
}

}  // namespace icft
