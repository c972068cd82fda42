//! Command-line front end tying the library into reproducible runs:
//! synthetic traces, per-user auctions, revenue-share queries, the
//! adoption simulator, profile valuation, the policy proxy, and earnings
//! reports.
//!
//! Every command is deterministic given its flags and `--seed`; internal
//! randomness is derived per purpose (and per user and period for
//! auctions) from that one seed. Exit codes: 0 success, 1 usage error,
//! 2 runtime failure.

use clap::{Args, Parser, Subcommand};
use infomarket::adoption;
use infomarket::auction::{self, Bid, BidRecord, OutcomeRecord};
use infomarket::config::RunConfig;
use infomarket::game;
use infomarket::io::{read_jsonl, write_jsonl};
use infomarket::ledger::{self, LedgerEntry, PricingMode};
use infomarket::policy::{GrantRecord, PolicyState};
use infomarket::proxy;
use infomarket::seed::rng_for;
use infomarket::trace::{generate_trace, Trace, TraceParams};
use infomarket::valuation::{bid_for_user, AnonymizedProfile, Catalog, CatalogRecord, ClickModel, ProfileRecord};
use infomarket::MarketType;
use std::collections::HashMap;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "infomarket", version, about = "Information market for web-browsing data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Work with synthetic browsing traces.
    Trace {
        #[command(subcommand)]
        command: TraceCommand,
    },
    /// Run the privacy auctions.
    Auction {
        #[command(subcommand)]
        command: AuctionCommand,
    },
    /// Print the revenue shares for one market configuration.
    Shapley(ShapleyArgs),
    /// Run the adoption simulation over a trace.
    Simulate(SimulateArgs),
    /// Price one anonymized profile against an advertiser catalog.
    Valuate(ValuateArgs),
    /// Serve the policy-enforcing forward proxy.
    Proxy(ProxyArgs),
    /// Summarize per-user earnings from a payment ledger.
    Report(ReportArgs),
}

#[derive(Subcommand)]
enum TraceCommand {
    /// Generate a synthetic trace file.
    Gen(TraceGenArgs),
}

#[derive(Args)]
struct TraceGenArgs {
    /// Number of distinct users.
    #[arg(long, default_value_t = 100)]
    users: u64,
    /// Number of distinct publisher sites.
    #[arg(long, default_value_t = 20)]
    publishers: u64,
    /// Number of ad networks embedded across publishers.
    #[arg(long, default_value_t = 5)]
    aggs: u64,
    /// Number of page-visit events.
    #[arg(long, default_value_t = 1000)]
    events: u64,
    /// Zipf-style exponent for publisher popularity (0 = uniform).
    #[arg(long, default_value_t = 1.0)]
    popularity_skew: f64,
    /// Zipf-style exponent for ad-network embedding (0 = uniform).
    #[arg(long, default_value_t = 1.0)]
    embedding_skew: f64,
    /// Comma-separated keyword vocabulary for publisher sites.
    #[arg(long, value_delimiter = ',', default_value = "travel,finance,sports,tech,health,music,food,auto")]
    keywords: Vec<String>,
    /// RNG seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output trace file (JSON lines).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum AuctionCommand {
    /// Run one auction per user over a bid file.
    Run(AuctionRunArgs),
}

#[derive(Args)]
struct AuctionRunArgs {
    /// Bid file: one JSON record {user, aggregator, max_price} per line.
    #[arg(long)]
    bids: PathBuf,
    /// Privacy parameter of the pricing mechanism.
    #[arg(long, default_value_t = 1.0)]
    epsilon: f64,
    /// Auction period stamped on outcomes, grants, and ledger entries.
    #[arg(long, default_value_t = 1)]
    period: u64,
    /// RNG seed; each user's auction derives its own stream.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output outcome file (JSON lines).
    #[arg(long)]
    out: PathBuf,
    /// Also write winner grants for the proxy here.
    #[arg(long)]
    grants: Option<PathBuf>,
    /// Append winner payments to this ledger.
    #[arg(long)]
    ledger: Option<PathBuf>,
}

#[derive(Args)]
struct ShapleyArgs {
    /// Market design: mediated, direct, dnt-mediated, or dnt-direct.
    #[arg(long)]
    market: MarketType,
    /// Implicit-consent intent coefficient.
    #[arg(long = "impl")]
    implicit: f64,
    /// Explicit-consent intent coefficient.
    #[arg(long = "expl")]
    explicit: f64,
}

#[derive(Args)]
struct SimulateArgs {
    /// `key = value` config file; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Trace file (overrides the config's `trace`).
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Advertiser catalog file (overrides the config's `catalog`).
    #[arg(long)]
    catalog: Option<PathBuf>,
    /// Output directory for result CSVs (overrides the config's `output`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Ledger file to append user payments to (overrides the config's `ledger`).
    #[arg(long)]
    ledger: Option<PathBuf>,
    /// Any other config key, repeatable: --set beta=4 --set alpha=0.9
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Market design (overrides the config's `market_type`).
    #[arg(long)]
    market: Option<MarketType>,
    /// Pricing mode: shapley or auction (overrides the config's `pricing`).
    #[arg(long)]
    pricing: Option<PricingMode>,
    /// RNG seed (overrides the config's `seed`).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ValuateArgs {
    /// Profile file: one JSON record {site, count, keywords} per line.
    #[arg(long)]
    profile: PathBuf,
    /// Advertiser catalog file: {advertiser, keyword, cpc} per line.
    #[arg(long)]
    catalog: PathBuf,
    /// Constant click probability.
    #[arg(long, default_value_t = 0.1)]
    pi: f64,
    /// Money units per unit of allocation value.
    #[arg(long, default_value_t = 1.0)]
    currency_scale: f64,
}

#[derive(Args)]
struct ProxyArgs {
    /// Proxy listen address.
    #[arg(long, default_value = "127.0.0.1:3128")]
    listen: String,
    /// Control endpoint for grant updates (one JSON line per update).
    #[arg(long, default_value = "127.0.0.1:3129")]
    control: String,
    /// State directory: whitelists/<user>.txt, grants.jsonl, cdn_allowlist.txt.
    #[arg(long)]
    state_dir: PathBuf,
    /// Starting auction period.
    #[arg(long, default_value_t = 1)]
    period: u64,
    /// Transaction log file (JSON lines).
    #[arg(long)]
    log: Option<PathBuf>,
    /// Pin a hostname to an address ahead of DNS, repeatable: --resolve host=1.2.3.4
    #[arg(long, value_name = "HOST=IP")]
    resolve: Vec<String>,
}

#[derive(Args)]
struct ReportArgs {
    /// Ledger file to summarize.
    #[arg(long)]
    ledger: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

type CliResult = Result<(), Box<dyn std::error::Error>>;

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Trace { command: TraceCommand::Gen(args) } => cmd_trace_gen(args),
        Command::Auction { command: AuctionCommand::Run(args) } => cmd_auction_run(args),
        Command::Shapley(args) => cmd_shapley(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Valuate(args) => cmd_valuate(args),
        Command::Proxy(args) => cmd_proxy(args),
        Command::Report(args) => cmd_report(args),
    }
}

fn cmd_trace_gen(args: TraceGenArgs) -> CliResult {
    let params = TraceParams {
        users: args.users,
        publishers: args.publishers,
        aggregators: args.aggs,
        events: args.events,
        popularity_skew: args.popularity_skew,
        embedding_skew: args.embedding_skew,
        keywords: args.keywords,
    };
    let events = generate_trace(&params, args.seed)?;
    Trace::save(&events, &args.out)?;
    println!("wrote {} events to {}", events.len(), args.out.display());
    Ok(())
}

fn cmd_auction_run(args: AuctionRunArgs) -> CliResult {
    let records: Vec<BidRecord> = read_jsonl(&args.bids)?;
    // group bids per user, keeping first-seen line numbers for errors
    let mut by_user: std::collections::BTreeMap<String, Vec<Bid>> = Default::default();
    let mut seen: HashMap<(String, String), usize> = HashMap::new();
    for (i, record) in records.iter().enumerate() {
        let line = i + 1;
        let key = (record.user.clone(), record.aggregator.clone());
        if let Some(first) = seen.insert(key, line) {
            return Err(format!(
                "{}:{line}: duplicate bid for user {} from aggregator {} (first at line {first})",
                args.bids.display(),
                record.user,
                record.aggregator
            )
            .into());
        }
        by_user
            .entry(record.user.clone())
            .or_default()
            .push(Bid { aggregator: record.aggregator.clone(), max_price: record.max_price });
    }

    let period = args.period;
    let mut outcomes = Vec::new();
    let mut grants = Vec::new();
    let mut payments = Vec::new();
    for (user, bids) in &by_user {
        let mut rng = rng_for(args.seed, "auction", &[user, &period.to_string()]);
        let outcome = auction::run_auction(bids, args.epsilon, &mut rng)?;
        for winner in &outcome.winners {
            grants.push(GrantRecord { user: user.clone(), aggregator: winner.clone(), period });
            payments.push(LedgerEntry {
                period,
                user: user.clone(),
                aggregator: winner.clone(),
                amount: outcome.clearing_price,
                pricing_mode: PricingMode::Auction,
            });
        }
        outcomes.push(OutcomeRecord {
            user: user.clone(),
            period,
            clearing_price: outcome.clearing_price,
            winners: outcome.winners,
            user_revenue: outcome.user_revenue,
        });
    }

    write_jsonl(&args.out, &outcomes)?;
    println!("wrote {} outcomes to {}", outcomes.len(), args.out.display());
    if let Some(path) = &args.grants {
        write_jsonl(path, &grants)?;
        println!("wrote {} grants to {}", grants.len(), path.display());
    }
    if let Some(path) = &args.ledger {
        ledger::append(path, &payments)?;
        println!("appended {} payments to {}", payments.len(), path.display());
    }
    Ok(())
}

fn cmd_shapley(args: ShapleyArgs) -> CliResult {
    let shares = game::shapley_closed_form(args.market, args.explicit, args.implicit)?;
    println!("market = {}", args.market);
    println!("user = {:.6}", shares.user);
    println!(
        "aggregator = {:.6} (baseline {:.6} + surplus {:.6})",
        shares.aggregator_total(),
        shares.aggregator_baseline,
        shares.aggregator
    );
    if let Some(m) = shares.market {
        println!("market_maker = {m:.6}");
    }
    println!("surplus_total = {:.6}", shares.surplus_total());
    println!("user_gains = {}", shares.user > 0.0);
    Ok(())
}

fn cmd_simulate(args: SimulateArgs) -> CliResult {
    let mut config = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for pair in &args.sets {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| format!("--set {pair:?} is not KEY=VALUE"))?;
        config.set(key.trim(), value.trim())?;
    }
    if let Some(path) = &args.trace {
        config.trace = Some(path.clone());
    }
    if let Some(path) = &args.catalog {
        config.catalog = Some(path.clone());
    }
    if let Some(path) = &args.out {
        config.output = Some(path.clone());
    }
    if let Some(path) = &args.ledger {
        config.ledger = Some(path.clone());
    }
    if let Some(market) = args.market {
        config.market_type = market;
    }
    if let Some(pricing) = args.pricing {
        config.pricing = pricing;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    config.validate()?;
    config.check_input_paths()?;

    let trace_path = config.trace.clone().ok_or("no trace file given (flag --trace or config key trace)")?;
    let catalog_path = config.catalog.clone().ok_or("no catalog file given (flag --catalog or config key catalog)")?;
    let out_dir = config.output.clone().ok_or("no output directory given (flag --out or config key output)")?;

    let trace = Trace::load(&trace_path)?;
    let catalog = Catalog::from_records(read_jsonl::<CatalogRecord>(&catalog_path)?)?;
    let click = config.click_model()?;
    let intents = adoption::derive_all_intents(&trace, &catalog, config.beta, &click)?;
    let sim = adoption::SimulationConfig {
        market: config.market_config()?,
        cpm: config.cpm_params()?,
        click,
        round_cap: config.round_cap,
        periods_per_month: config.periods_per_month,
        pricing: config.pricing,
        seed: config.seed,
    };
    let result = adoption::run_adoption(&trace, &intents, Some(&catalog), &sim)?;

    std::fs::create_dir_all(&out_dir)?;
    let files = adoption::report(&result, &out_dir)?;
    if let Some(path) = &config.ledger {
        ledger::append(path, &result.ledger)?;
    }

    println!("market = {}, pricing = {}", result.market_type, result.pricing);
    println!("rounds = {}", result.rounds.last().map_or(0, |r| r.round));
    println!(
        "users joined = {}/{} ({:.1}%)",
        result.users_joined.len(),
        result.users_total,
        100.0 * result.user_fraction()
    );
    println!(
        "aggregators joined = {}/{} ({:.1}%)",
        result.aggregators_joined.len(),
        result.aggregators_total,
        100.0 * result.aggregator_fraction()
    );
    println!("total revenue ratio = {:.4}", result.total_revenue_ratio());
    println!("aggregator revenue ratio = {:.4}", result.aggregator_revenue_ratio());
    for f in files {
        println!("wrote {}", f.display());
    }
    if let Some(path) = &config.ledger {
        println!("appended {} payments to {}", result.ledger.len(), path.display());
    }
    Ok(())
}

fn cmd_valuate(args: ValuateArgs) -> CliResult {
    let profile = AnonymizedProfile::from_records(read_jsonl::<ProfileRecord>(&args.profile)?);
    let catalog = Catalog::from_records(read_jsonl::<CatalogRecord>(&args.catalog)?)?;
    let model = ClickModel::new(args.pi)?;
    let bid = bid_for_user(&profile, &catalog, &model, args.currency_scale);
    println!("{bid}");
    Ok(())
}

fn cmd_proxy(args: ProxyArgs) -> CliResult {
    let state = PolicyState::load(&args.state_dir)?;
    let mut resolve = Vec::new();
    for pair in &args.resolve {
        let (host, ip) = pair.split_once('=').ok_or_else(|| format!("--resolve {pair:?} is not HOST=IP"))?;
        resolve.push((host.to_string(), ip.parse::<std::net::IpAddr>()?));
    }
    let handle = proxy::serve(&args.listen, &args.control, state, args.period, args.log, &resolve)?;
    println!("proxy listening on {}", handle.addr());
    println!("control listening on {}", handle.control_addr());
    use std::io::Write as _;
    std::io::stdout().flush()?;
    handle.wait();
    Ok(())
}

fn cmd_report(args: ReportArgs) -> CliResult {
    let entries = ledger::read(&args.ledger)?;
    let (per_user, total) = ledger::summarize(&entries);
    // output scales with the user count, so tolerate a closed pipe
    let out = std::io::stdout().lock();
    let mut out = std::io::BufWriter::new(out);
    let write = (|| -> std::io::Result<()> {
        use std::io::Write as _;
        writeln!(out, "user,total")?;
        for (user, amount) in &per_user {
            writeln!(out, "{user},{amount}")?;
        }
        writeln!(out, "total,{total}")?;
        out.flush()
    })();
    match write {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        other => Ok(other?),
    }
}
