#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace kgadapt {

// Lowercased, whitespace-separated words of text.
std::vector<std::string> split_words(std::string_view text);

// Words joined by single spaces; the form used for concept uniqueness.
std::string normalize_text(std::string_view text);

}  // namespace kgadapt
