#pragma once

#include <string>
#include <vector>

namespace icft {

std::vector<std::string> whitespace_tokens(const std::string& text);

// Longest-common-subsequence F measure between whitespace-tokenized texts:
// R = LCS/len(ref), P = LCS/len(pred), F = 2RP/(R+P); 0 when either is empty.
double rouge_l(const std::string& prediction, const std::string& reference);

int lcs_length(const std::vector<std::string>& a, const std::vector<std::string>& b);

}  // namespace icft
