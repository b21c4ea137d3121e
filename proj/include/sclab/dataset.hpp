#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "sclab/conversation.hpp"

namespace sclab {

struct Dataset {
  std::vector<QuestionRecord> questions;
  std::string digest;  // sha256 of the source bytes
};

// BoolQ-style JSON lines: {"question", "passage", "answer": bool}, optional "id".
// Records without an id are named "q<line number>". Duplicate ids, empty
// questions and malformed lines throw Error(kConfig) naming the line.
Dataset parse_dataset(std::string_view text);
Dataset load_dataset(const std::string& path);

std::string sha256_hex(std::string_view bytes);
std::string read_file(const std::string& path);
// Writes through a temporary file and a rename; creates parent directories.
void write_file(const std::string& path, std::string_view content);

}  // namespace sclab
