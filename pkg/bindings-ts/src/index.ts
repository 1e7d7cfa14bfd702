export {
  ArrayScene,
  Provenance,
  POINT_RECORD_BYTES,
  SEMANTIC_MASK,
  numPoints,
  readLabels,
  readProvenance,
  readSceneBin,
  validateScene,
  writeSceneBin,
} from "./sceneFormat.js";
export { EraseResult, bindErase } from "./erase.js";
export { AugmentOptions, MixFillConfig, MixFillResult, bindMixAndFill } from "./augment.js";
