#include "abcp/protocol.hpp"

#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <istream>
#include <ostream>

#include "abcp/serialize.hpp"

namespace abcp {

namespace {

using nlohmann::json;

u64 seed_from_json(const json& j) {
  if (j.is_string()) return u64_from_string(j.get<std::string>());
  if (j.is_number_unsigned()) return j.get<u64>();
  if (j.is_number_integer()) {
    const i64 v = j.get<i64>();
    if (v < 0) throw std::invalid_argument("seed must be non-negative");
    return static_cast<u64>(v);
  }
  throw std::invalid_argument("seed must be an integer or decimal string");
}

}  // namespace

void serve_evaluator(Evaluator& ev, std::istream& in, std::ostream& out) {
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json reply;
    try {
      const json req = json::parse(line);
      const PruningAction action = action_from_json(req.at("action"));
      const u64 seed = seed_from_json(req.at("seed"));
      const EvalResult r = ev.evaluate(action, seed);
      reply = json{{"loss", r.loss}, {"flops", u64_to_string(r.flops)}};
    } catch (const std::exception& e) {
      reply = json{{"error", e.what()}};
    }
    out << reply.dump() << '\n' << std::flush;
  }
}

ProcessEvaluator::ProcessEvaluator(const std::string& command) {
  int to_child[2], from_child[2];
  if (pipe(to_child) != 0 || pipe(from_child) != 0)
    throw std::runtime_error("cannot create evaluator pipes");
  const pid_t pid = fork();
  if (pid < 0) throw std::runtime_error("cannot fork evaluator process");
  if (pid == 0) {
    dup2(to_child[0], STDIN_FILENO);
    dup2(from_child[1], STDOUT_FILENO);
    close(to_child[0]);
    close(to_child[1]);
    close(from_child[0]);
    close(from_child[1]);
    execl("/bin/sh", "sh", "-c", command.c_str(), static_cast<char*>(nullptr));
    _exit(127);
  }
  close(to_child[0]);
  close(from_child[1]);
  pid_ = pid;
  to_child_ = fdopen(to_child[1], "w");
  from_child_ = fdopen(from_child[0], "r");
  if (!to_child_ || !from_child_) {
    shutdown();
    throw std::runtime_error("cannot open evaluator streams");
  }
}

ProcessEvaluator::~ProcessEvaluator() { shutdown(); }

void ProcessEvaluator::shutdown() {
  if (to_child_) {
    fclose(to_child_);
    to_child_ = nullptr;
  }
  if (from_child_) {
    fclose(from_child_);
    from_child_ = nullptr;
  }
  if (pid_ > 0) {
    int status = 0;
    waitpid(static_cast<pid_t>(pid_), &status, 0);
    pid_ = -1;
  }
}

EvalResult ProcessEvaluator::evaluate(const PruningAction& action, u64 seed) {
  if (!to_child_ || !from_child_)
    throw std::runtime_error("evaluator process is not running");
  const nlohmann::json req{{"action", action_to_json(action)},
                           {"seed", u64_to_string(seed)}};
  const std::string line = req.dump();
  if (std::fputs(line.c_str(), to_child_) == EOF ||
      std::fputc('\n', to_child_) == EOF || std::fflush(to_child_) != 0)
    throw std::runtime_error("evaluator process rejected the request");

  std::string resp;
  for (int ch = std::fgetc(from_child_); ch != '\n';
       ch = std::fgetc(from_child_)) {
    if (ch == EOF)
      throw std::runtime_error("evaluator process closed the stream");
    resp.push_back(static_cast<char>(ch));
  }
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(resp);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::runtime_error(std::string("malformed evaluator response: ") +
                             e.what());
  }
  if (j.contains("error"))
    throw std::runtime_error("evaluator error: " +
                             j.at("error").get<std::string>());
  EvalResult r;
  r.loss = j.at("loss").get<double>();
  const nlohmann::json& fl = j.at("flops");
  r.flops = fl.is_string() ? u64_from_string(fl.get<std::string>())
                           : fl.get<u64>();
  return r;
}

}  // namespace abcp
