/**
 * Standalone exporter CLI.
 *
 *   node dist/main.js --input feats.npy --space-id clap --modality audio \
 *       --output clap.audio.emb1 [--format npy|csv] [--normalize]
 *
 * Exit codes: 0 success, 1 conversion failure, 2 usage error.
 */

import { ExportJob, InputFormat, runExportJob } from "./export";

const USAGE = `usage: export-adapter --input PATH [--input PATH ...] --space-id ID --modality NAME
                      --output PATH [--format npy|csv] [--normalize]`;

function parseArgs(argv: string[]): ExportJob {
  const job: ExportJob = {
    inputs: [],
    spaceId: "",
    modality: "",
    normalize: false,
    output: "",
  };
  for (let i = 0; i < argv.length; i++) {
    const flag = argv[i];
    const next = () => {
      i += 1;
      if (i >= argv.length) {
        throw new UsageError(`missing value for ${flag}`);
      }
      return argv[i];
    };
    switch (flag) {
      case "--input":
        job.inputs.push(next());
        break;
      case "--format": {
        const value = next();
        if (value !== "npy" && value !== "csv") {
          throw new UsageError(`--format must be npy or csv, got '${value}'`);
        }
        job.format = value as InputFormat;
        break;
      }
      case "--space-id":
        job.spaceId = next();
        break;
      case "--modality":
        job.modality = next();
        break;
      case "--output":
        job.output = next();
        break;
      case "--normalize":
        job.normalize = true;
        break;
      case "--help":
      case "-h":
        console.log(USAGE);
        process.exit(0);
      default:
        throw new UsageError(`unknown flag '${flag}'`);
    }
  }
  if (job.inputs.length === 0 || !job.spaceId || !job.modality || !job.output) {
    throw new UsageError("required: --input, --space-id, --modality, --output");
  }
  return job;
}

class UsageError extends Error {}

function main(): number {
  let job: ExportJob;
  try {
    job = parseArgs(process.argv.slice(2));
  } catch (err) {
    console.error(`error: ${(err as Error).message}`);
    console.error(USAGE);
    return 2;
  }
  try {
    const { rows, dim } = runExportJob(job);
    console.log(`wrote ${job.output} (${rows}x${dim}) + manifest`);
    return 0;
  } catch (err) {
    console.error(`error: ${(err as Error).message}`);
    return 1;
  }
}

process.exit(main());
