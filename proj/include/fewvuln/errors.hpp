#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>
#include <exception>

namespace fewvuln {

// Precondition or domain violation (empty inputs, undefined metrics, bad sizes).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Malformed CoNLL input. `line()` is 1-based (0 when unknown); `file()` is set
// once the error crosses a file boundary.
class ParseError : public std::exception {
 public:
  ParseError(std::string detail, std::size_t line) : detail_(std::move(detail)), line_(line) { rebuild(); }

  const char* what() const noexcept override { return message_.c_str(); }
  std::size_t line() const noexcept { return line_; }
  const std::string& file() const noexcept { return file_; }
  const std::string& detail() const noexcept { return detail_; }

  void set_file(std::string file) {
    file_ = std::move(file);
    rebuild();
  }

 private:
  void rebuild() {
    message_.clear();
    if (!file_.empty()) message_ += file_ + ":";
    if (line_) message_ += std::to_string(line_) + ":";
    if (!message_.empty()) message_ += " ";
    message_ += detail_;
  }

  std::string detail_;
  std::size_t line_;
  std::string file_;
  std::string message_;
};

// Tag string outside {SN, SV, O}.
class TagError : public ParseError {
 public:
  TagError(const std::string& tag, std::size_t line) : ParseError("unknown tag '" + tag + "'", line), tag_(tag) {}
  const std::string& tag() const noexcept { return tag_; }

 private:
  std::string tag_;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-finite loss during optimisation; `step()` is the global step it happened at.
class TrainingError : public std::runtime_error {
 public:
  TrainingError(const std::string& what, std::size_t step)
      : std::runtime_error("step " + std::to_string(step) + ": " + what), step_(step) {}
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

// Experiment configuration that cannot run (missing stage dependencies, unresolvable encoder).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace fewvuln
