#include "sclab/dataset.hpp"

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "sclab/errors.hpp"

namespace sclab {

std::string sha256_hex(std::string_view bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1) {
    throw Error(ErrorKind::kIo, "sha256 failed");
  }
  std::string out;
  out.reserve(len * 2);
  for (unsigned int i = 0; i < len; ++i) out += fmt::format("{:02x}", md[i]);
  return out;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::kIo, "cannot open '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_file(const std::string& path, std::string_view content) {
  namespace fs = std::filesystem;
  std::error_code ec;
  const fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path(), ec);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorKind::kIo, "cannot write '" + path + "'");
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw Error(ErrorKind::kIo, "short write to '" + path + "'");
  }
  fs::rename(tmp, target, ec);
  if (ec) throw Error(ErrorKind::kIo, "cannot rename '" + tmp + "': " + ec.message());
}

Dataset parse_dataset(std::string_view text) {
  Dataset ds;
  ds.digest = sha256_hex(text);
  std::set<std::string> seen;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    const std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;

    const auto j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object()) {
      throw Error(ErrorKind::kConfig, fmt::format("dataset line {}: not a JSON object", line_no));
    }
    QuestionRecord q;
    try {
      q.id = j.contains("id") ? (j["id"].is_string() ? j["id"].get<std::string>() : j["id"].dump())
                              : fmt::format("q{}", line_no);
      q.question = j.at("question").get<std::string>();
      if (j.contains("passage") && !j["passage"].is_null()) q.passage = j["passage"].get<std::string>();
      q.gold = j.at("answer").get<bool>();
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::kConfig, fmt::format("dataset line {}: {}", line_no, e.what()));
    }
    if (q.question.empty()) throw Error(ErrorKind::kConfig, fmt::format("dataset line {}: empty question", line_no));
    if (!seen.insert(q.id).second) {
      throw Error(ErrorKind::kConfig, fmt::format("dataset line {}: duplicate id '{}'", line_no, q.id));
    }
    ds.questions.push_back(std::move(q));
  }
  return ds;
}

Dataset load_dataset(const std::string& path) {
  try {
    return parse_dataset(read_file(path));
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::kIo) throw Error(ErrorKind::kConfig, e.what());
    throw;
  }
}

}  // namespace sclab
