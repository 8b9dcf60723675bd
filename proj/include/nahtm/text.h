#pragma once

#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

namespace nahtm::text {

// Splits on '.', '!' or '?' followed by whitespace or end of input. The
// terminator stays with its sentence; surrounding whitespace is trimmed and
// blank pieces are dropped.
std::vector<std::string> split_sentences(std::string_view text);

// Lowercased maximal runs of ASCII letters and digits. Bytes outside ASCII
// are treated as separators.
std::vector<std::string> tokenize(std::string_view sentence);

// Light suffix stripper (plural and -ing/-ed forms); keeps stems of at
// least three characters.
std::string stem(std::string_view word);

// The English stopword list shipped with NLTK.
const std::unordered_set<std::string>& english_stopwords();

}  // namespace nahtm::text
