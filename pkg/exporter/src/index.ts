export { loadCheckpoint, inferChannels, tensorData, CHECKPOINT_FORMAT } from "./checkpoint";
export { exportCheckpoint } from "./convert";
export type { ExportJob, ExportResult } from "./convert";
export { forwardCheckpoint, outputActivations } from "./evaluate";
export type { Activation } from "./evaluate";
export {
  DEFAULT_ALLOWLIST,
  CheckpointParseError,
  ShapeMismatchError,
  UnsupportedOperatorError,
} from "./types";
export type { Checkpoint, CheckpointNode, LoadedCheckpoint, TensorRef } from "./types";
