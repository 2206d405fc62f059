// Command line front end: benchmark runner, wire-protocol server, and a few
// operational helpers around the stores. The persistent store root comes
// from --data-dir or the HPS_DATA_DIR environment variable.

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <thread>

#include <CLI11.hpp>

#include "hps/bench.hpp"
#include "hps/server.hpp"
#include "hps/workload.hpp"

namespace {

std::filesystem::path resolve_data_dir(const std::string& flag_value,
                                       bool required) {
  if (!flag_value.empty()) {
    return flag_value;
  }
  if (const char* env = std::getenv("HPS_DATA_DIR"); env && *env) {
    return env;
  }
  if (required) {
    throw CLI::ValidationError(
        "data dir", "pass --data-dir or set HPS_DATA_DIR");
  }
  return {};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hierarchical parameter server for embedding tables"};
  app.require_subcommand(1);

  // bench
  auto* bench = app.add_subcommand("bench", "run the closed-loop benchmark");
  hps::BenchConfig bench_config;
  std::string bench_out;
  std::string bench_data_dir;
  bench->add_option("--alpha", bench_config.alpha, "power-law exponent")
      ->capture_default_str();
  bench->add_option("--keys", bench_config.keys, "key space size")
      ->capture_default_str();
  bench->add_option("--dim", bench_config.dim, "embedding dimension")
      ->capture_default_str();
  bench->add_option("--cache-slabsets", bench_config.cache_slabsets,
                    "slabsets in the cache (0 sizes to ~10% of keys)")
      ->capture_default_str();
  bench->add_option("--threshold", bench_config.threshold,
                    "hit-rate threshold for the sync/async switch")
      ->capture_default_str();
  bench->add_option("--batch-size", bench_config.batch_size, "keys per batch")
      ->capture_default_str();
  bench->add_option("--iterations", bench_config.iterations, "batches to run")
      ->capture_default_str();
  bench->add_option("--seed", bench_config.seed, "stream seed")
      ->capture_default_str();
  bench->add_option("--workspace-pool", bench_config.workspace_pool,
                    "workspaces in the pool")
      ->capture_default_str();
  bench->add_option("--table", bench_config.table, "table name")
      ->capture_default_str();
  bench->add_option("--data-dir", bench_data_dir,
                    "persistent store root (default: throwaway temp dir)");
  bench->add_flag("!--no-volatile", bench_config.use_volatile,
                  "disable the volatile tier");
  bench->add_option("--out", bench_out, "CSV output path (default stdout)");

  // serve
  auto* serve = app.add_subcommand("serve", "serve tables over TCP");
  std::string listen = "127.0.0.1:7700";
  std::string serve_data_dir;
  hps::NodeConfig node_config;
  unsigned refresh_interval_ms = 0;
  serve->add_option("--listen", listen, "host:port to bind")
      ->capture_default_str();
  serve->add_option("--tables", serve_data_dir,
                    "persistent store root holding the table namespaces");
  serve->add_option("--data-dir", serve_data_dir,
                    "alias for --tables (HPS_DATA_DIR fallback)");
  serve->add_option("--cache-slabsets", node_config.cache_slabsets,
                    "slabsets per table cache")
      ->capture_default_str();
  serve->add_option("--threshold", node_config.engine.hit_rate_threshold,
                    "hit-rate threshold for the sync/async switch")
      ->capture_default_str();
  serve->add_option("--refresh-interval-ms", refresh_interval_ms,
                    "periodic cache refresh interval (0 = manual only)")
      ->capture_default_str();

  // refresh
  auto* refresh = app.add_subcommand(
      "refresh", "ask a running server to refresh one table's cache");
  std::string refresh_table;
  std::string connect = "127.0.0.1:7700";
  refresh->add_option("--table", refresh_table, "table name")->required();
  refresh->add_option("--connect", connect, "server host:port")
      ->capture_default_str();

  // gen
  auto* gen = app.add_subcommand(
      "gen", "generate a table in the persistent store");
  std::string gen_table_name = "bench";
  std::uint64_t gen_keys = 100000;
  std::uint32_t gen_dim = 64;
  std::uint64_t gen_seed = 42;
  std::string gen_data_dir;
  gen->add_option("--table", gen_table_name, "table name")
      ->capture_default_str();
  gen->add_option("--keys", gen_keys, "number of keys")->capture_default_str();
  gen->add_option("--dim", gen_dim, "embedding dimension")
      ->capture_default_str();
  gen->add_option("--seed", gen_seed, "vector seed")->capture_default_str();
  gen->add_option("--data-dir", gen_data_dir,
                  "persistent store root (HPS_DATA_DIR fallback)");

  // sample
  auto* sample = app.add_subcommand(
      "sample", "write a power-law key stream to a binary file");
  double sample_alpha = 1.2;
  std::uint64_t sample_keys = 100000;
  std::uint64_t sample_count = 1 << 20;
  std::uint64_t sample_seed = 42;
  std::string sample_out;
  sample->add_option("--alpha", sample_alpha, "power-law exponent")
      ->capture_default_str();
  sample->add_option("--keys", sample_keys, "key space size")
      ->capture_default_str();
  sample->add_option("--n", sample_count, "keys to draw")
      ->capture_default_str();
  sample->add_option("--seed", sample_seed, "permutation and draw seed")
      ->capture_default_str();
  sample->add_option("--out", sample_out, "output file")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (bench->parsed()) {
      bench_config.data_dir = resolve_data_dir(bench_data_dir, false);
      hps::BenchSummary summary;
      if (bench_out.empty()) {
        summary = hps::run_bench(bench_config, std::cout);
      } else {
        std::ofstream out(bench_out, std::ios::trunc);
        if (!out) {
          std::cerr << "cannot open " << bench_out << "\n";
          return 1;
        }
        summary = hps::run_bench(bench_config, out);
      }
      std::cerr << "steady-state hit rate " << summary.steady_hit_rate
                << ", mean latency " << summary.mean_latency_us << " us\n";
      return 0;
    }

    if (serve->parsed()) {
      node_config.data_dir = resolve_data_dir(serve_data_dir, true);
      if (refresh_interval_ms > 0) {
        node_config.refresh.interval =
            std::chrono::milliseconds(refresh_interval_ms);
        node_config.start_periodic_refresh = true;
      }
      hps::Node node(node_config);
      const auto [host, port] = hps::parse_host_port(listen);
      hps::WireServer server(node, host, port);
      server.start();
      std::cerr << "serving";
      for (const auto& name : node.table_names()) {
        std::cerr << " " << name;
      }
      std::cerr << " on " << host << ":" << server.port() << "\n";
      for (;;) {
        std::this_thread::sleep_for(std::chrono::seconds(3600));
      }
    }

    if (refresh->parsed()) {
      const auto [host, port] = hps::parse_host_port(connect);
      hps::WireClient client(host, port);
      hps::WireRequest req;
      req.opcode = hps::Opcode::Refresh;
      req.table = refresh_table;
      const hps::WireResponse resp = client.call(req);
      if (resp.status != hps::Status::Ok) {
        std::cerr << "refresh failed with status "
                  << static_cast<int>(resp.status) << "\n";
        return 1;
      }
      std::cout << "refreshed " << resp.refreshed << " rows, "
                << resp.unresolved << " unresolved\n";
      return 0;
    }

    if (gen->parsed()) {
      const auto dir = resolve_data_dir(gen_data_dir, true);
      hps::PersistentStore pdb(dir);
      hps::gen_table(pdb, hps::TableId{gen_table_name, gen_dim}, gen_keys,
                     gen_seed);
      std::cout << "generated " << gen_keys << " keys of dim " << gen_dim
                << " into " << (dir / hps::escape_table_dir(gen_table_name))
                << "\n";
      return 0;
    }

    if (sample->parsed()) {
      hps::PowerLawSpec spec;
      spec.alpha = sample_alpha;
      spec.keyspace = sample_keys;
      spec.permute_seed = sample_seed;
      hps::PowerLawSampler sampler(spec);
      const auto keys = sampler.sample(sample_count, sample_seed);
      hps::write_key_stream(sample_out, keys);
      std::cout << "wrote " << keys.size() << " keys to " << sample_out
                << "\n";
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
