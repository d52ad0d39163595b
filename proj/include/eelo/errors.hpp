#pragma once

#include <stdexcept>
#include <string>

namespace eelo {

// Input/usage problems: bad files, bad config values, out-of-range requests.
// The CLI maps these to exit code 2.
class InputError : public std::runtime_error {
public:
    explicit InputError(const std::string& msg) : std::runtime_error(msg) {}
};

// Prompt or generation does not fit the model context window.
class ContextOverflowError : public InputError {
public:
    explicit ContextOverflowError(const std::string& msg) : InputError(msg) {}
};

// Weight-store problems, one code per failure mode.
enum class StoreErrorCode {
    missing_tensor,
    shape_mismatch,
    corrupt_file,
    bad_manifest,
};

class StoreError : public InputError {
public:
    StoreError(StoreErrorCode code, const std::string& msg)
        : InputError(msg), code_(code) {}
    StoreErrorCode code() const { return code_; }

private:
    StoreErrorCode code_;
};

// Failures that arise after inputs were accepted (e.g. training divergence).
// The CLI maps these to exit code 3.
class RuntimeFailure : public std::runtime_error {
public:
    explicit RuntimeFailure(const std::string& msg) : std::runtime_error(msg) {}
};

} // namespace eelo
