#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <mutex>
#include <sys/stat.h>

#include "distdesign/orchestrator.hpp"
#include "distdesign/simgen.hpp"

using namespace distdesign;

namespace {

const SimulatedStudy& small_study() {
  static const auto s = simulate_study(500, 18, 3, Setting::one, 41);
  return s;
}

OrchestratorConfig base_config() {
  OrchestratorConfig c;
  c.designer.propensity.lasso.n_lambda = 40;
  c.step_timeout = Millis(120'000);
  return c;
}

struct Recorded {
  RunResult result;
  std::vector<std::string> transcript;
};

Recorded run_recorded(const Dataset& data, const PartitionSpec& partition, OrchestratorConfig cfg) {
  Recorded r;
  std::mutex mu;
  cfg.transcript = [&](const std::string& line) {
    std::lock_guard lock(mu);
    r.transcript.push_back(line);
  };
  r.result = run_distributed(data, partition, cfg);
  return r;
}

void expect_same_selection(const SelectionResult& a, const SelectionResult& b) {
  EXPECT_EQ(a.winner, b.winner);
  ASSERT_EQ(a.table.size(), b.table.size());
  for (std::size_t i = 0; i < a.table.size(); ++i) {
    EXPECT_EQ(a.table[i].design, b.table[i].design);
    EXPECT_EQ(a.table[i].per_covariate, b.table[i].per_covariate) << a.table[i].design.label();
    EXPECT_EQ(a.table[i].n_retained, b.table[i].n_retained);
  }
}

// A stand-in worker: designer `bad_id` runs `bad_script`, everyone else
// execs the real worker.
std::string wrapper_script(const std::string& name, int bad_id, const std::string& bad_script) {
  const auto path = std::filesystem::temp_directory_path() / (name + "-" + std::to_string(::getpid()) + ".sh");
  std::ofstream out(path);
  out << "#!/bin/sh\n"
      << "id=$4\n"
      << "if [ \"$id\" = \"" << bad_id << "\" ]; then\n"
      << bad_script << "\n"
      << "fi\n"
      << "exec \"" << DISTDESIGN_CLI << "\" \"$@\"\n";
  out.close();
  ::chmod(path.c_str(), 0755);
  return path.string();
}

std::string failure_of(const Dataset& data, const PartitionSpec& partition, const OrchestratorConfig& cfg) {
  try {
    run_distributed(data, partition, cfg);
  } catch (const Error& e) {
    return e.what();
  }
  return {};
}

}  // namespace

TEST(Ledger, FormulaSmall) {
  TransferLedger l;
  l.score_values = 20;
  l.design_entries = 2 * 1 * 10;
  l.balance_entries = 4 * 2 * 1;
  EXPECT_TRUE(ledger_check(l, 10, 2, 4, 1).pass);
  l.score_values = 19;
  const auto c = ledger_check(l, 10, 2, 4, 1);
  EXPECT_FALSE(c.pass);
  ASSERT_EQ(c.failures.size(), 1u);
  EXPECT_NE(c.failures[0].find("expected 20"), std::string::npos);
}

TEST(Ledger, FormulaPaperScale) {
  TransferLedger l;
  l.score_values = 300000;
  l.design_entries = 240000;
  l.balance_entries = 120 * 6 * 4;
  EXPECT_TRUE(ledger_check(l, 10000, 6, 120, 4).pass);
  l.design_entries = 240001;
  EXPECT_FALSE(ledger_check(l, 10000, 6, 120, 4).pass);
}

TEST(Run, CompletedRunPassesLedgerAndTranscript) {
  const auto& s = small_study();
  const auto rec = run_recorded(s.data, s.partition, base_config());
  const auto& r = rec.result;
  const auto n = s.data.n_subjects();
  const auto check = ledger_check(r.ledger, n, 3, s.data.n_covariates(), 4);
  EXPECT_TRUE(check.pass) << (check.failures.empty() ? "" : check.failures[0]);
  EXPECT_EQ(r.ledger.score_values, 3u * 2u * n);
  EXPECT_EQ(r.ledger.score_values_uploaded, 3u * n);
  EXPECT_EQ(r.ledger.covariate_values, n * s.data.n_covariates());
  EXPECT_EQ(r.designs.size(), 12u);
  EXPECT_EQ(r.selection.table.size(), 12u);
  for (const char* step : {"step1", "step2", "step3", "step4"}) EXPECT_TRUE(r.ledger.step_seconds.count(step));
  const auto tc = check_transcript(rec.transcript, s.partition, 4);
  EXPECT_TRUE(tc.ok()) << tc.violations.front();
  // HELLO, block, scores, broadcast, 4 candidates, request, 12 reports, selection, shutdown
  EXPECT_EQ(rec.transcript.size(), 3u * (1 + 1 + 1 + 1 + 4 + 1 + 12 + 1 + 1));
}

TEST(Run, RepeatedRunsAreIdentical) {
  const auto& s = small_study();
  const auto a = run_distributed(s.data, s.partition, base_config());
  const auto b = run_distributed(s.data, s.partition, base_config());
  expect_same_selection(a.selection, b.selection);
  EXPECT_EQ(a.designs, b.designs);
}

TEST(Run, SingleDesignerIsTrivial) {
  const auto& s = small_study();
  const auto part = contiguous_partition(s.data.n_covariates(), 1);
  auto cfg = base_config();
  cfg.designer.methods = {DesignMethod::caliper};
  const auto rec = run_recorded(s.data, part, cfg);
  ASSERT_EQ(rec.result.designs.size(), 1u);
  EXPECT_EQ(rec.result.selection.winner, (DesignRef{ScoreSource::designer, 1, DesignMethod::caliper}));
  EXPECT_EQ(rec.result.ledger.score_values, 0u);
  EXPECT_TRUE(check_transcript(rec.transcript, part, 1).ok());
}

TEST(Run, SingleFullWidthDesignerEqualsAllData) {
  const auto& s = small_study();
  ASSERT_LE(s.data.n_covariates(), 20u);  // below the all-data interaction cap
  const auto part = contiguous_partition(s.data.n_covariates(), 1);
  const auto cfg = base_config();
  const auto dist = run_distributed(s.data, part, cfg);
  const auto all = run_all_data(s.data, cfg.designer);
  ASSERT_EQ(dist.designs.size(), all.designs.size());
  for (std::size_t k = 0; k < all.designs.size(); ++k) {
    EXPECT_EQ(dist.designs[k].assignments, all.designs[k].assignments) << to_string(all.designs[k].ref.method);
    EXPECT_EQ(dist.designs[k].params, all.designs[k].params);
    EXPECT_EQ(dist.selection.table[k].per_covariate, all.reports[k].per_covariate);
    EXPECT_EQ(dist.selection.table[k].d_max, all.reports[k].d_max);
  }
}

TEST(Run, MultiProcessMatchesInProcess) {
  const auto& s = small_study();
  const auto in = run_distributed(s.data, s.partition, base_config());
  auto cfg = base_config();
  cfg.transport = Transport::multi_process;
  cfg.worker_executable = DISTDESIGN_CLI;
  const auto rec = run_recorded(s.data, s.partition, cfg);
  expect_same_selection(in.selection, rec.result.selection);
  EXPECT_EQ(in.designs, rec.result.designs);
  EXPECT_TRUE(ledger_check(rec.result.ledger, s.data.n_subjects(), 3, s.data.n_covariates(), 4).pass);
  EXPECT_TRUE(check_transcript(rec.transcript, s.partition, 4).ok());
}

TEST(Run, TcpWorkersMatchInProcess) {
  const auto& s = small_study();
  const auto in = run_distributed(s.data, s.partition, base_config());
  auto cfg = base_config();
  cfg.transport = Transport::multi_process;
  cfg.listen_address = "127.0.0.1:0";
  std::vector<std::unique_ptr<WorkerProcess>> workers;
  cfg.on_listening = [&](int port) {
    // Connect in reverse id order; the coordinator sorts them out.
    for (int id = 3; id >= 1; --id)
      workers.push_back(std::make_unique<WorkerProcess>(
          DISTDESIGN_CLI, std::vector<std::string>{"worker", "--connect", "127.0.0.1:" + std::to_string(port),
                                                   "--designer-id", std::to_string(id)}));
  };
  const auto out = run_distributed(s.data, s.partition, cfg);
  expect_same_selection(in.selection, out.selection);
  for (auto& w : workers) EXPECT_EQ(w->wait(Millis(10'000)), 0);
}

TEST(Failure, KilledWorkerNamesDesignerAndStep) {
  const auto& s = small_study();
  auto cfg = base_config();
  cfg.transport = Transport::multi_process;
  // Say HELLO, take the block, then die.
  cfg.worker_executable = wrapper_script(
      "kill-after-block", 2,
      "printf '{\"version\":1,\"msg_type\":\"HELLO\",\"sender\":2,\"recipient\":\"coordinator\","
      "\"payload\":{\"role\":\"worker\"}}\\n'\nhead -n 1 >/dev/null\nkill -9 $$");
  const auto msg = failure_of(s.data, s.partition, cfg);
  EXPECT_NE(msg.find("designer 2 failed during step 2"), std::string::npos) << msg;
  EXPECT_NE(msg.find("exit status"), std::string::npos) << msg;
  std::filesystem::remove(cfg.worker_executable);
}

TEST(Failure, SilentWorkerTimesOutAtTheBarrier) {
  const auto& s = small_study();
  auto cfg = base_config();
  cfg.transport = Transport::multi_process;
  cfg.step_timeout = Millis(1500);
  cfg.worker_executable = wrapper_script(
      "silent", 3,
      "printf '{\"version\":1,\"msg_type\":\"HELLO\",\"sender\":3,\"recipient\":\"coordinator\","
      "\"payload\":{\"role\":\"worker\"}}\\n'\nexec sleep 30");
  const auto t0 = std::chrono::steady_clock::now();
  const auto msg = failure_of(s.data, s.partition, cfg);
  EXPECT_NE(msg.find("designer 3 failed during step 2"), std::string::npos) << msg;
  EXPECT_NE(msg.find("timed out"), std::string::npos) << msg;
  EXPECT_LT(std::chrono::steady_clock::now() - t0, std::chrono::seconds(20));
  std::filesystem::remove(cfg.worker_executable);
}

TEST(Failure, WrongVersionWorkerIsAProtocolError) {
  const auto& s = small_study();
  auto cfg = base_config();
  cfg.transport = Transport::multi_process;
  cfg.worker_executable = wrapper_script(
      "old-version", 1,
      "printf '{\"version\":0,\"msg_type\":\"HELLO\",\"sender\":1,\"recipient\":\"coordinator\","
      "\"payload\":{\"role\":\"worker\"}}\\n'\nexec sleep 30");
  try {
    run_distributed(s.data, s.partition, cfg);
    ADD_FAILURE() << "run succeeded";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::protocol);
    EXPECT_NE(std::string(e.what()).find("designer 1 failed during step 1"), std::string::npos) << e.what();
  }
  std::filesystem::remove(cfg.worker_executable);
}

TEST(Failure, UnusableConfigIsRejectedBeforeWorkersStart) {
  const auto& s = small_study();
  auto cfg = base_config();
  cfg.designer.methods.clear();
  EXPECT_THROW(run_distributed(s.data, s.partition, cfg), UsageError);
  cfg = base_config();
  cfg.transport = Transport::multi_process;
  EXPECT_THROW(run_distributed(s.data, s.partition, cfg), UsageError);
}

TEST(Transcript, DetectsIsolationBreach) {
  const auto& s = small_study();
  auto rec = run_recorded(s.data, s.partition, base_config());
  for (auto& line : rec.transcript) {
    auto m = decode_message(line);
    if (m.type() != MsgType::assign_block || m.recipient != 2) continue;
    auto& a = std::get<AssignBlock>(m.payload);
    a.columns[0] = s.partition.blocks[0][0];
    line = encode_message(m);
  }
  const auto tc = check_transcript(rec.transcript, s.partition, 4);
  ASSERT_FALSE(tc.ok());
  EXPECT_NE(tc.violations.front().find("outside its block"), std::string::npos) << tc.violations.front();
}

TEST(Transcript, DetectsBroadcastBeforeBarrier) {
  const auto& s = small_study();
  auto rec = run_recorded(s.data, s.partition, base_config());
  auto first_broadcast = std::find_if(rec.transcript.begin(), rec.transcript.end(), [](const std::string& l) {
    return decode_message(l).type() == MsgType::scores_broadcast;
  });
  auto last_scores = std::find_if(rec.transcript.rbegin(), rec.transcript.rend(), [](const std::string& l) {
    return decode_message(l).type() == MsgType::conditional_scores;
  });
  ASSERT_NE(first_broadcast, rec.transcript.end());
  std::iter_swap(first_broadcast, last_scores);
  const auto tc = check_transcript(rec.transcript, s.partition, 4);
  ASSERT_FALSE(tc.ok());
  EXPECT_NE(tc.violations.front().find("before all 3 arrived"), std::string::npos) << tc.violations.front();
}

TEST(Transcript, DetectsDesignBeforeSharedScores) {
  const auto& s = small_study();
  auto rec = run_recorded(s.data, s.partition, base_config());
  std::vector<std::string> reordered;
  std::string held;
  for (const auto& l : rec.transcript) {
    const auto m = decode_message(l);
    if (m.type() == MsgType::scores_broadcast && m.recipient == 1 && held.empty()) {
      held = l;
      continue;
    }
    reordered.push_back(l);
    if (m.type() == MsgType::candidate_design && m.sender == 1 && !held.empty()) {
      reordered.push_back(held);
      held.clear();
    }
  }
  EXPECT_FALSE(check_transcript(reordered, s.partition, 4).ok());
}

TEST(Transcript, DesignerNeverSeesForeignColumns) {
  // Every covariate value a designer receives belongs to its own block.
  const auto& s = small_study();
  const auto rec = run_recorded(s.data, s.partition, base_config());
  for (const auto& l : rec.transcript) {
    const auto m = decode_message(l);
    if (m.type() != MsgType::assign_block) continue;
    const auto& a = std::get<AssignBlock>(m.payload);
    const auto& own = s.partition.blocks[static_cast<std::size_t>(m.recipient - 1)];
    EXPECT_EQ(a.columns, own);
    ASSERT_EQ(a.values.size(), own.size() * s.data.n_subjects());
    for (std::size_t k = 0; k < own.size(); ++k)
      for (std::size_t i = 0; i < s.data.n_subjects(); ++i)
        ASSERT_EQ(a.values[k * s.data.n_subjects() + i],
                  s.data.covariates()(static_cast<Eigen::Index>(i), own[k]));
  }
}

TEST(Serve, HelloThenShutdownEndsCleanly) {
  auto [coord, worker] = make_queue_pair();
  std::thread t([w = std::move(worker)]() mutable { serve_designer(*w, 4, Millis(5000)); });
  const auto hello = coord->receive(Millis(5000));
  EXPECT_EQ(hello.type(), MsgType::hello);
  EXPECT_EQ(hello.sender, 4);
  coord->send(Message{kProtocolVersion, kCoordinator, 4, Shutdown{"done"}});
  t.join();
}

TEST(Serve, MessageForAnotherDesignerIsRejected) {
  auto [coord, worker] = make_queue_pair();
  std::exception_ptr failure;
  std::thread t([&, w = std::move(worker)]() mutable {
    try {
      serve_designer(*w, 1, Millis(5000));
    } catch (...) {
      failure = std::current_exception();
    }
  });
  coord->receive(Millis(5000));
  const auto block = extract_block(small_study().data, 2, small_study().partition.blocks[1]);
  coord->send(Message{kProtocolVersion, kCoordinator, 2, assign_block_message(block, {"a", "b", "c", "d", "e", "f"}, 3, {})});
  t.join();
  ASSERT_TRUE(failure);
  EXPECT_THROW(std::rethrow_exception(failure), ProtocolError);
}
